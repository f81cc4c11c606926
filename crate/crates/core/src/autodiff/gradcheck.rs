use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute disagreement below which an entry counts as matching, however
/// small its magnitude.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Entry error is `|a - n| / max(|a|, |n|)`, taken as zero when
/// `|a - n| <= GRAD_CHECK_ABS_FLOOR`. The check passes iff the maximum entry
/// error is at most `tol`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point)?;
        let y = f(&mut tape, xv)?;
        let v = tape.value(y);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let y = f(&mut tape, xv)?;
    let base = tape.value(y).item();
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let again = eval(x.clone())?;
    if again != base {
        return Err(Error::NonDeterministic((again - base).abs()));
    }

    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let diff = (a - n).abs();
        let err = if diff <= GRAD_CHECK_ABS_FLOOR {
            0.0
        } else {
            diff / a.abs().max(n.abs())
        };
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        pass: max_rel_err <= tol,
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
