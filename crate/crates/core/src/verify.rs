//! Finite-difference verification of every differentiable op the model uses.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::losses::{adv_loss_d, adv_loss_fc, cls_loss, diff_loss};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::SeededRng;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_TRIALS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub trials: usize,
    pub elements: usize,
    pub passed: bool,
}

fn random(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

/// Random tensor whose entries keep away from zero, where ELU's second
/// derivative jumps.
fn random_off_zero(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mag = rng.random_range(0.05..scale);
        *v = if rng.random_bool(0.5) { mag } else { -mag };
    }
    t
}

/// `Σ w ⊙ y`: a scalar whose gradient exercises every output element with
/// a distinct weight.
fn project(tape: &mut Tape<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.input(w.clone());
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

type Case = (Vec<Tensor>, Box<dyn for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>>);

fn case(name: &str, rng: &mut SeededRng) -> Case {
    match name {
        "conv2d" => {
            let w_out = random(rng, &[2, 3, 2, 5], 1.0);
            (
                vec![random(rng, &[2, 2, 3, 7], 1.0), random(rng, &[3, 2, 2, 3], 0.5), random(rng, &[3], 0.5)],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], (1, 1))?;
                    project(t, y, &w_out)
                }),
            )
        }
        "avg_pool2d" => {
            let w_out = random(rng, &[2, 2, 1, 3], 1.0);
            (
                vec![random(rng, &[2, 2, 1, 12], 1.0)],
                Box::new(move |t, v| {
                    let y = t.avg_pool2d(v[0], (1, 4), (1, 3))?;
                    project(t, y, &w_out)
                }),
            )
        }
        "elu" => {
            let w_out = random(rng, &[3, 5], 1.0);
            (
                vec![random_off_zero(rng, &[3, 5], 2.0)],
                Box::new(move |t, v| {
                    let y = t.elu(v[0])?;
                    project(t, y, &w_out)
                }),
            )
        }
        "linear" => {
            let w_out = random(rng, &[3, 5], 1.0);
            (
                vec![random(rng, &[3, 4], 1.0), random(rng, &[4, 5], 0.5), random(rng, &[5], 0.5)],
                Box::new(move |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &w_out)
                }),
            )
        }
        "flatten_concat_time" => {
            let w_out = random(rng, &[2, 18], 1.0);
            (
                vec![random(rng, &[2, 3, 4], 1.0), random(rng, &[2, 3, 2], 1.0)],
                Box::new(move |t, v| {
                    let y = t.concat_time(v[0], v[1])?;
                    let y = t.flatten(y)?;
                    project(t, y, &w_out)
                }),
            )
        }
        "softmax_cls_loss" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let w_out = random(rng, &[4, 5], 1.0);
            (
                vec![random(rng, &[4, 5], 2.0)],
                Box::new(move |t, v| {
                    let ce = cls_loss(t, v[0], &labels)?;
                    let p = t.softmax(v[0])?;
                    let s = project(t, p, &w_out)?;
                    t.add(ce, s)
                }),
            )
        }
        "diff_loss" => (
            vec![random(rng, &[2, 3, 4], 1.0), random(rng, &[2, 3, 4], 1.0)],
            Box::new(|t, v| diff_loss(t, v[0], v[1])),
        ),
        "adv_loss_d" => (
            vec![random(rng, &[3, 2], 2.0), random(rng, &[4, 2], 2.0)],
            Box::new(|t, v| adv_loss_d(t, v[0], v[1])),
        ),
        "adv_loss_fc" => (vec![random(rng, &[4, 2], 2.0)], Box::new(|t, v| adv_loss_fc(t, v[0]))),
        "encoder_chain" => {
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            (
                vec![
                    random(rng, &[2, 1, 3, 14], 1.0),
                    random(rng, &[2, 1, 1, 4], 0.5),
                    random(rng, &[2], 0.5),
                    random(rng, &[2, 2, 3, 1], 0.5),
                    random(rng, &[2], 0.5),
                    random(rng, &[16, 3], 0.5),
                    random(rng, &[3], 0.5),
                ],
                Box::new(move |t, v| {
                    let h = t.conv2d(v[0], v[1], v[2], (1, 1))?;
                    let h = t.conv2d(h, v[3], v[4], (1, 1))?;
                    let h = t.avg_pool2d(h, (1, 4), (1, 2))?;
                    let h = t.elu(h)?;
                    let z = t.reshape(h, vec![2, 2, 4])?;
                    let j = t.concat_time(z, z)?;
                    let f = t.flatten(j)?;
                    let logits = t.linear(f, v[5], v[6])?;
                    let ce = cls_loss(t, logits, &labels)?;
                    let d = diff_loss(t, z, z)?;
                    let d = t.scale(d, 0.1)?;
                    t.add(ce, d)
                }),
            )
        }
        other => unreachable!("no gradcheck case {other}"),
    }
}

/// Ops covered by [`run_gradcheck_suite`], in report order.
pub const CHECKED_OPS: [&str; 10] = [
    "conv2d",
    "avg_pool2d",
    "elu",
    "linear",
    "flatten_concat_time",
    "softmax_cls_loss",
    "diff_loss",
    "adv_loss_d",
    "adv_loss_fc",
    "encoder_chain",
];

/// Checks each op at [`GRADCHECK_TRIALS`] seeded random inputs against
/// central differences.
pub fn run_gradcheck_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(CHECKED_OPS.len());
    for (i, &op) in CHECKED_OPS.iter().enumerate() {
        let mut rng = SeededRng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let mut worst: f64 = 0.0;
        let mut elements = 0;
        for _ in 0..GRADCHECK_TRIALS {
            let (inputs, f) = case(op, &mut rng);
            let report = grad_check(f, &inputs, GRADCHECK_TOL)?;
            worst = worst.max(report.max_rel_error);
            elements += report.elements;
        }
        out.push(OpCheck {
            op,
            max_rel_error: worst,
            trials: GRADCHECK_TRIALS,
            elements,
            passed: worst <= GRADCHECK_TOL,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let checks = run_gradcheck_suite(0).unwrap();
        assert_eq!(checks.len(), CHECKED_OPS.len());
        for c in &checks {
            assert!(c.passed, "{} max rel error {}", c.op, c.max_rel_error);
            assert!(c.elements > 0);
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // x · stop_grad(x): the tape sees gradient x, finite differences see 2x.
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.5]).unwrap();
        let report = grad_check(
            |t, v| {
                let c = t.input(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                t.sum(y)
            },
            &[x],
            GRADCHECK_TOL,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
