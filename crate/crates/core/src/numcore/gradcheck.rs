//! Central finite-difference validation of tape gradients.

use std::collections::BTreeMap;

use super::tape::{ParamVars, Params, Tape, Var};
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest relative error seen in each checked parameter.
    pub per_param: BTreeMap<String, f64>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences over every coordinate of every parameter.
pub fn finite_diff_check<F>(f: F, params: &Params, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    finite_diff_check_filtered(f, params, step, |_| true)
}

/// Like [`finite_diff_check`], restricted to parameters accepted by `select`.
pub fn finite_diff_check_filtered<F, S>(f: F, params: &Params, step: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |p: &Params| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.register_all(p)?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::contract(format!("checked function returned shape {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {first:e} then {second:e}"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let vars = tape.register_all(params)?;
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        per_param: BTreeMap::new(),
        coordinates: 0,
    };
    let mut work = params.clone();
    for (name, value) in params {
        if !select(name) {
            continue;
        }
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        let mut worst_here: f64 = 0.0;
        for idx in 0..value.len() {
            let base = value.data()[idx];
            let slot = |w: &mut Params, v: f64| {
                if let Some(t) = w.get_mut(name) {
                    t.data_mut()[idx] = v;
                }
            };
            slot(&mut work, base + step);
            let plus = eval(&work)?;
            slot(&mut work, base - step);
            let minus = eval(&work)?;
            slot(&mut work, base);

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[idx];
            let err = relative_error(a, numeric);
            worst_here = worst_here.max(err);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.coordinates += 1;
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{BackwardCtx, Tensor};

    fn square_loss(tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
        let w = vars.get("w")?;
        let sq = tape.mul(w, w)?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::scalar(3.0));
        let r = finite_diff_check(square_loss, &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn planted_ten_percent_fault_is_reported() {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::new(vec![2], vec![0.7, -1.3]).unwrap());
        let wrong = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
            let w = vars.get("w")?;
            let out = tape.value(w).map(|x| x.sin());
            let y = tape.custom(
                &[w],
                out,
                Box::new(|ctx: &BackwardCtx<'_>| {
                    vec![ctx.grad.zip_map(ctx.inputs[0], "sin", |g, x| 1.1 * g * x.cos()).unwrap()]
                }),
            );
            Ok(tape.sum(y))
        };
        let r = finite_diff_check(wrong, &p, 1e-5).unwrap();
        // |1.1 g - g| / (1.1 g)
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let mut p = Params::new();
        p.insert("w".into(), Tensor::scalar(1.0));
        let f = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
            counter.set(counter.get() + 1.0);
            let w = vars.get("w")?;
            Ok(tape.scale(w, counter.get()))
        };
        assert!(matches!(finite_diff_check(f, &p, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::scalar(1.0));
        assert!(finite_diff_check(square_loss, &p, 0.0).is_err());
    }
}
