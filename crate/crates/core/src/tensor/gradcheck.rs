use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub elements: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    value
        .item()
        .ok_or_else(|| Error::NonScalarLoss(value.shape().to_vec()))
}

/// Central finite-difference gradient of a scalar function w.r.t. every
/// element of every input.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let plus = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = x - h;
            let minus = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = x;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients of `f` against central finite differences.
///
/// The error of one element is `|a - n| / max(1e-8, |a| + |n|)`; the report
/// holds the maximum over all elements of all inputs. Functions that record
/// training-mode dropout are rejected since they are not deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::StochasticGraph);
    }
    let grads = tape.backward(out)?;
    let numeric = numeric_gradient(&f, inputs, FD_STEP)?;

    let mut max_rel_error: f64 = 0.0;
    let mut elements = 0;
    for (var, (input, num)) in vars.iter().zip(inputs.iter().zip(&numeric)) {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for (a, n) in analytic.iter().zip(num) {
            let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            max_rel_error = max_rel_error.max(err);
            elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        elements,
        passed: max_rel_error <= tol,
    })
}
