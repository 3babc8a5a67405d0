//! Central finite-difference gradient checks.
//!
//! The checker only ever evaluates the supplied closure forward; analytic
//! gradients come from one [`Tape::backward`] call and are compared entry by
//! entry against `(f(x + h) - f(x - h)) / 2h`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

/// Lower bound on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every entry of every input that requires a gradient.
///
/// `f` must build a scalar from the leaves it is handed, in input order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0] as f64)
    };

    let analytic: Vec<Option<Vec<Float>>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get(v).map(<[Float]>::to_vec)).collect()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        for j in 0..input.len() {
            let orig = input.values()[j];
            probe[i].values_mut()[j] = orig + h as Float;
            let up = eval(&probe)?;
            probe[i].values_mut()[j] = orig - h as Float;
            let down = eval(&probe)?;
            probe[i].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j] as f64);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Reduces a non-scalar output to a scalar via a fixed random projection so
/// every output entry contributes a distinct weight.
pub fn project(tape: &mut Tape<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.shape(), weights.values().to_vec())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}
