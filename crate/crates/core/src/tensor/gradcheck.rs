//! Central finite-difference verification of tape gradients, in `f64`.

use std::fmt;

use super::{GradTape, Tensor, Var};
use crate::error::Result;

/// Entries whose analytic and numeric gradients are both below this
/// magnitude are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-7;

/// Multiple of machine epsilon allowed for cancellation in `plus - minus`.
const CANCELLATION_ULPS: f64 = 256.0;

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.max_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:<24} {:>6} {:>12.3e} {:>12.3e} {:>10.1e} {}",
                self.label,
                p.name,
                p.entries,
                p.max_rel_error,
                p.max_abs_error,
                self.tolerance,
                if p.max_rel_error <= self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Relative and absolute error of one entry from its central difference.
///
/// Differences within the rounding noise of the loss itself carry no
/// information and count as zero relative error. This matters for
/// exactly-zero gradients, such as a conv bias feeding a norm layer.
fn entry_error(analytic: f64, plus: f64, minus: f64, step: f64) -> (f64, f64) {
    let numeric = (plus - minus) / (2.0 * step);
    let abs = (analytic - numeric).abs();
    let noise = CANCELLATION_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * step);
    let rel = if abs > noise {
        relative_error(analytic, numeric)
    } else {
        0.0
    };
    (rel, abs)
}

/// Checks the gradient of `graph` with respect to every named input.
///
/// `graph` builds a scalar loss on a fresh tape from the input variables
/// (recorded as parameters in the given order). Each entry is perturbed by
/// `±step` and compared against the analytic gradient.
pub fn gradient_check<G>(
    label: &str,
    graph: G,
    inputs: &[(&str, Tensor<f64>)],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    G: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = graph(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, v)| tape.param(v.clone())).collect();
    let loss = graph(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (slot, ((name, _), var)) in inputs.iter().zip(&vars).enumerate() {
        let n = values[slot].numel();
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let orig = values[slot].data()[i];
            values[slot].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[slot].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[slot].data_mut()[i] = orig;
            let (rel, abs) = entry_error(*a, plus, minus, step);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        params.push(ParamError {
            name: name.to_string(),
            entries: n,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        tolerance,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundoff_on_a_zero_gradient_is_ignored() {
        // Loss 7.2 with a 40-ulp wobble between the two evaluations.
        let l = 7.2;
        let (rel, _) = entry_error(0.0, l + 40.0 * f64::EPSILON * l, l, 1e-6);
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn a_wrong_gradient_is_reported() {
        let step = 1e-6;
        let (l, g) = (7.2, 1e-3);
        let (rel, _) = entry_error(g * 1.01, l + g * step, l - g * step, step);
        assert!(rel > 5e-3, "{rel}");
        // A missing gradient well above the noise is also caught.
        let (rel, _) = entry_error(0.0, l + 1e-4 * step, l - 1e-4 * step, step);
        assert!(rel > 0.5, "{rel}");
    }

    #[test]
    fn square_passes() {
        let x = Tensor::new([3], vec![0.5, -1.5, 2.0]).unwrap();
        let report = gradient_check(
            "square",
            |tape, v| {
                let y = tape.square(v[0])?;
                tape.sum(y)
            },
            &[("x", x)],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
