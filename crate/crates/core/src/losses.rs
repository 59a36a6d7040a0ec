//! Classification, adversarial and difference losses and their weighted total.
//!
//! Every loss is a batch mean so that the weight on the difference term does
//! not depend on the batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Discriminator target: resting-state features are fake, task features real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(usize)]
pub enum RealFake {
    Fake = 0,
    Real = 1,
}

impl RealFake {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-step (or epoch-mean) loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_cls: f64,
    pub l_adv_d: f64,
    pub l_adv_fc: f64,
    pub l_diff: f64,
    pub l_all: f64,
    pub lambda: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_adv_d, self.l_adv_fc, self.l_diff, self.l_all]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several records (zeros for an empty slice).
    pub fn mean(records: &[LossRecord]) -> LossRecord {
        let n = records.len().max(1) as f64;
        let mut out = records.iter().fold(LossRecord::default(), |acc, r| LossRecord {
            l_cls: acc.l_cls + r.l_cls,
            l_adv_d: acc.l_adv_d + r.l_adv_d,
            l_adv_fc: acc.l_adv_fc + r.l_adv_fc,
            l_diff: acc.l_diff + r.l_diff,
            l_all: acc.l_all + r.l_all,
            lambda: 0.0,
        });
        out.l_cls /= n;
        out.l_adv_d /= n;
        out.l_adv_fc /= n;
        out.l_diff /= n;
        out.l_all /= n;
        out.lambda = records.first().map_or(0.0, |r| r.lambda);
        out
    }
}

/// Softmax cross-entropy of classifier logits against class labels.
pub fn cls_loss(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

fn labelled(tape: &mut Tape<'_>, logits: Var, label: RealFake) -> Result<(Var, usize)> {
    let shape = tape.value(logits).shape();
    let batch = match *shape {
        [b, 2] => b,
        _ => {
            return Err(Error::invalid(
                "adversarial loss",
                format!("discriminator logits must be [B, 2], got {shape:?}"),
            ))
        }
    };
    let targets = vec![label.index(); batch];
    Ok((tape.cross_entropy(logits, &targets)?, batch))
}

/// Discriminator objective: real batch against label 1, fake batch against
/// label 0, averaged over all samples of both batches.
pub fn adv_loss_d(tape: &mut Tape<'_>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let (real, nr) = labelled(tape, real_logits, RealFake::Real)?;
    let (fake, nf) = labelled(tape, fake_logits, RealFake::Fake)?;
    let total = (nr + nf) as f64;
    let real = tape.scale(real, nr as f64 / total)?;
    let fake = tape.scale(fake, nf as f64 / total)?;
    tape.add(real, fake)
}

/// Encoder-side adversarial objective: the fake batch scored against the
/// "real" label (non-saturating form).
pub fn adv_loss_fc(tape: &mut Tape<'_>, fake_logits: Var) -> Result<Var> {
    labelled(tape, fake_logits, RealFake::Real).map(|(v, _)| v)
}

/// `(1/B) Σ_i ‖z_cⁱᵀ z_sⁱ‖²_F` over `[B, F, T]` feature maps.
pub fn diff_loss(tape: &mut Tape<'_>, zc: Var, zs: Var) -> Result<Var> {
    let sc = tape.value(zc).shape().to_vec();
    let ss = tape.value(zs).shape().to_vec();
    if sc.len() != 3 {
        return Err(Error::RankMismatch { op: "diff_loss", expected: 3, shape: sc });
    }
    if sc != ss {
        let axis = sc.iter().zip(&ss).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::ShapeMismatch {
            op: "diff_loss",
            axis,
            expected: sc.get(axis).copied().unwrap_or(0),
            got: ss.get(axis).copied().unwrap_or(0),
        });
    }
    let cross = tape.matmul_t(zc, zs)?;
    let sq = tape.square(cross)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / sc[0] as f64)
}

/// `l_cls + l_adv + lambda * l_diff` on the tape.
pub fn total_loss(tape: &mut Tape<'_>, l_cls: Var, l_adv_fc: Var, l_diff: Var, lambda: f64) -> Result<Var> {
    let base = tape.add(l_cls, l_adv_fc)?;
    let weighted = tape.scale(l_diff, lambda)?;
    tape.add(base, weighted)
}

/// Scalar form of [`total_loss`]; rejects non-finite components.
pub fn total_loss_value(l_cls: f64, l_adv_fc: f64, l_diff: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("l_cls", l_cls), ("l_adv_fc", l_adv_fc), ("l_diff", l_diff), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("total loss component {name}")));
        }
    }
    Ok(l_cls + l_adv_fc + lambda * l_diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(tape: &Tape<'_>, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn logits(tape: &mut Tape<'_>, rows: &[&[f64]]) -> Var {
        tape.input(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn cls_loss_examples() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.0; 6]]);
        let l = cls_loss(&mut tape, x, &[2]).unwrap();
        assert!((scalar(&tape, l) - 6f64.ln()).abs() < 1e-12);

        let x = logits(&mut tape, &[&[0.0, 30.0, 0.0]]);
        let l = cls_loss(&mut tape, x, &[1]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);

        let x = logits(&mut tape, &[&[1.0, 0.0]]);
        let l = cls_loss(&mut tape, x, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((scalar(&tape, l) - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((scalar(&tape, l) - 0.3132617).abs() < 1e-7);
    }

    #[test]
    fn cls_loss_shift_invariant() {
        let mut tape = Tape::new();
        let a = logits(&mut tape, &[&[0.3, -1.2, 2.0], &[1.0, 1.0, -4.0]]);
        let b = logits(&mut tape, &[&[10.3, 8.8, 12.0], &[-6.0, -6.0, -11.0]]);
        let la = cls_loss(&mut tape, a, &[2, 0]).unwrap();
        let lb = cls_loss(&mut tape, b, &[2, 0]).unwrap();
        assert!((scalar(&tape, la) - scalar(&tape, lb)).abs() < 1e-12);
    }

    #[test]
    fn adv_losses_at_zero_logits() {
        let mut tape = Tape::new();
        let r = logits(&mut tape, &[&[0.0, 0.0], &[0.0, 0.0]]);
        let f = logits(&mut tape, &[&[0.0, 0.0], &[0.0, 0.0]]);
        let d = adv_loss_d(&mut tape, r, f).unwrap();
        let g = adv_loss_fc(&mut tape, f).unwrap();
        assert!((scalar(&tape, d) - 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&tape, g) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adv_loss_d_separating_and_hand_value() {
        let mut tape = Tape::new();
        let r = logits(&mut tape, &[&[-30.0, 30.0]]);
        let f = logits(&mut tape, &[&[30.0, -30.0]]);
        let d = adv_loss_d(&mut tape, r, f).unwrap();
        assert!(scalar(&tape, d) < 1e-12);

        // correct-leaning by a margin of 2 on both branches
        let r = logits(&mut tape, &[&[0.0, 2.0]]);
        let f = logits(&mut tape, &[&[2.0, 0.0]]);
        let d = adv_loss_d(&mut tape, r, f).unwrap();
        let e2 = 2f64.exp();
        let each = -(e2 / (e2 + 1.0)).ln();
        assert!((scalar(&tape, d) - each).abs() < 1e-12);
        assert!((each - 0.1269280).abs() < 1e-7);

        // wrong-leaning by the same margin
        let r = logits(&mut tape, &[&[2.0, 0.0]]);
        let f = logits(&mut tape, &[&[0.0, 2.0]]);
        let d = adv_loss_d(&mut tape, r, f).unwrap();
        assert!((scalar(&tape, d) - (e2 + 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn adv_loss_fc_examples() {
        let mut tape = Tape::new();
        let fooled = logits(&mut tape, &[&[-30.0, 30.0]]);
        let l = adv_loss_fc(&mut tape, fooled).unwrap();
        assert!(scalar(&tape, l) < 1e-12);

        let leaning_fake = logits(&mut tape, &[&[1.0, 0.0]]);
        let l = adv_loss_fc(&mut tape, leaning_fake).unwrap();
        let e = std::f64::consts::E;
        assert!((scalar(&tape, l) - (-(1.0 / (1.0 + e)).ln())).abs() < 1e-12);
        assert!((scalar(&tape, l) - 1.3132617).abs() < 1e-7);
    }

    #[test]
    fn adv_loss_rejects_wrong_width() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[&[0.0, 0.0, 0.0]]);
        assert!(adv_loss_fc(&mut tape, x).is_err());
    }

    fn fmap(tape: &mut Tape<'_>, rows: &[&[f64]]) -> Var {
        let t = Tensor::from_rows(rows).unwrap();
        let shape = [1, t.shape()[0], t.shape()[1]];
        tape.input(t.reshaped(shape.to_vec()).unwrap())
    }

    #[test]
    fn diff_loss_examples() {
        let mut tape = Tape::new();
        let a = fmap(&mut tape, &[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = fmap(&mut tape, &[&[0.0, 0.0], &[0.0, 1.0]]);
        let l = diff_loss(&mut tape, a, b).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let i = fmap(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = diff_loss(&mut tape, i, i).unwrap();
        assert_eq!(scalar(&tape, l), 2.0);

        let p = fmap(&mut tape, &[&[0.0, 1.0], &[1.0, 0.0]]);
        let l = diff_loss(&mut tape, i, p).unwrap();
        assert_eq!(scalar(&tape, l), 2.0);
    }

    #[test]
    fn diff_loss_is_batch_mean() {
        let mut tape = Tape::new();
        let data = vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0];
        let z = tape.input(Tensor::new(vec![2, 2, 2], data).unwrap());
        let l = diff_loss(&mut tape, z, z).unwrap();
        // (‖I‖² + ‖4I‖²) / 2 = (2 + 32) / 2
        assert_eq!(scalar(&tape, l), 17.0);
    }

    #[test]
    fn diff_loss_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[1, 2, 3]));
        let b = tape.input(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(diff_loss(&mut tape, a, b), Err(Error::ShapeMismatch { axis: 2, .. })));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss_value(1.0, 0.5, 2.0, 1.0).unwrap(), 3.5);
        assert_eq!(total_loss_value(1.0, 0.5, 2.0, 0.0).unwrap(), 1.5);
        assert_eq!(total_loss_value(0.0, 0.0, 3.0, 0.5).unwrap(), 1.5);
        assert!(total_loss_value(f64::NAN, 0.0, 0.0, 1.0).is_err());

        let mut tape = Tape::new();
        let c = tape.input(Tensor::scalar(1.0));
        let a = tape.input(Tensor::scalar(0.5));
        let d = tape.input(Tensor::scalar(2.0));
        let t = total_loss(&mut tape, c, a, d, 1.0).unwrap();
        assert_eq!(scalar(&tape, t), 3.5);
    }
}
