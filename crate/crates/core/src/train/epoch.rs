//! One training epoch of the alternating scheme.
//!
//! Per mini-batch of task crops `X` and an equal number of resting crops
//! `X'`:
//! - step A (repeated `d_steps_per_batch` times) updates only the
//!   discriminator on `adv_loss_d(D(f_c(X)), D(f_c(X')))`; the encoder
//!   parameters are registered without gradients.
//! - step B updates the encoders and the classifier on the total loss with
//!   the discriminator registered without gradients.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::{classifier_pair, crop_batch, crop_offsets, Mode, TrainConfig};
use crate::data::{sample_resting_batch, DataError, EegDataset, EegTrial};
use crate::error::{Error, Result};
use crate::losses::{adv_loss_d, adv_loss_fc, cls_loss, diff_loss, total_loss, LossRecord};
use crate::net::{Branch, FactorModel, Group, Phase};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor};
use crate::SeededRng;

const ENCODER_GROUPS: [Group; 3] = [Group::Common, Group::Specific, Group::Classifier];

/// Model, optimizer moments and the random stream of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: FactorModel,
    /// Moments for the common encoder, specific encoder and classifier.
    pub encoder_optimizer: AdamW,
    pub discriminator_optimizer: AdamW,
    pub rng: SeededRng,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: FactorModel, cfg: &TrainConfig, rng_seed: u64) -> Self {
        let adam = AdamWConfig::new(cfg.lr, cfg.weight_decay);
        let enc: Vec<&Tensor> = ENCODER_GROUPS.iter().flat_map(|&g| model.params(g)).collect();
        let encoder_optimizer = AdamW::new(adam, &enc);
        let discriminator_optimizer = AdamW::new(adam, &model.params(Group::Discriminator));
        TrainState {
            model,
            encoder_optimizer,
            discriminator_optimizer,
            rng: SeededRng::seed_from_u64(rng_seed),
            epochs_done: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Step A: discriminator update.
    Discriminator,
    /// Step B: encoder and classifier update.
    Encoders,
}

/// Hooks around every optimizer step, for inspecting what each step touches.
pub trait StepObserver {
    fn before_step(&mut self, _kind: StepKind, _model: &FactorModel) {}
    fn after_step(&mut self, _kind: StepKind, _model: &FactorModel) {}
}

impl StepObserver for () {}

fn non_finite(what: &str, epoch: usize) -> Error {
    Error::NonFinite(format!("{what} at epoch {epoch}"))
}

/// Runs one epoch over the crops of `train_ids` and returns the epoch-mean
/// losses (weighted by batch size).
pub fn train_epoch<O: StepObserver + ?Sized>(
    state: &mut TrainState,
    ds: &EegDataset,
    train_ids: &[usize],
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<LossRecord> {
    if train_ids.is_empty() {
        return Err(DataError::Invalid("empty training set".into()).into());
    }
    let adversarial = cfg.mode.uses_common();
    if adversarial && ds.resting.is_empty() {
        return Err(DataError::EmptyRestingPool.into());
    }
    let by_id: HashMap<usize, &EegTrial> = ds.trials.iter().map(|t| (t.trial_id, t)).collect();
    let window = cfg.crop_window_samples;
    let offsets = crop_offsets(ds.trial_samples, window, cfg.crop_stride_samples)?;
    let mut crops: Vec<(&EegTrial, usize)> = Vec::with_capacity(train_ids.len() * offsets.len());
    for id in train_ids {
        let trial = *by_id
            .get(id)
            .ok_or_else(|| DataError::Invalid(format!("trial {id} is not a task trial of the dataset")))?;
        crops.extend(offsets.iter().map(|&o| (trial, o)));
    }
    crops.shuffle(&mut state.rng);

    let epoch = state.epochs_done + 1;
    let mut sum = LossRecord { lambda: cfg.lambda, ..LossRecord::default() };
    for batch in crops.chunks(cfg.batch_size) {
        let labels: Vec<usize> = batch.iter().map(|(t, _)| t.class().expect("task trial")).collect();
        let x = crop_batch(batch.iter().copied(), window);
        let x_rest = if adversarial {
            let rest = sample_resting_batch(ds, batch.len(), &mut state.rng)?;
            let rest: Vec<_> = rest
                .into_iter()
                .map(|t| (t, offsets[state.rng.random_range(0..offsets.len())]))
                .collect();
            Some(crop_batch(rest, window))
        } else {
            None
        };

        let mut l_adv_d = None;
        if let Some(xr) = &x_rest {
            let mut total = 0.0;
            for _ in 0..cfg.d_steps_per_batch {
                observer.before_step(StepKind::Discriminator, &state.model);
                total += discriminator_step(state, &x, xr)?;
                observer.after_step(StepKind::Discriminator, &state.model);
            }
            if cfg.d_steps_per_batch > 0 {
                l_adv_d = Some(total / cfg.d_steps_per_batch as f64);
            }
        }

        observer.before_step(StepKind::Encoders, &state.model);
        let rec = encoder_step(state, cfg, &x, x_rest.as_ref(), &labels, l_adv_d.is_none())?;
        observer.after_step(StepKind::Encoders, &state.model);
        let rec = LossRecord { l_adv_d: l_adv_d.unwrap_or(rec.l_adv_d), ..rec };
        if !rec.is_finite() {
            return Err(non_finite("training loss", epoch));
        }
        let w = batch.len() as f64;
        sum.l_cls += w * rec.l_cls;
        sum.l_adv_d += w * rec.l_adv_d;
        sum.l_adv_fc += w * rec.l_adv_fc;
        sum.l_diff += w * rec.l_diff;
        sum.l_all += w * rec.l_all;
    }
    let n = crops.len() as f64;
    state.epochs_done = epoch;
    Ok(LossRecord {
        l_cls: sum.l_cls / n,
        l_adv_d: sum.l_adv_d / n,
        l_adv_fc: sum.l_adv_fc / n,
        l_diff: sum.l_diff / n,
        l_all: sum.l_all / n,
        lambda: cfg.lambda,
    })
}

/// Step A. Returns the discriminator loss before the update.
fn discriminator_step(state: &mut TrainState, x: &Tensor, x_rest: &Tensor) -> Result<f64> {
    let TrainState {
        model,
        discriminator_optimizer,
        rng,
        epochs_done,
        ..
    } = state;
    let (value, grads) = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &[Group::Discriminator]);
        let xi = tape.leaf(x, false);
        let xr = tape.leaf(x_rest, false);
        let mut phase = Phase::Train(rng);
        let zc = bound.encode(&mut tape, Branch::Common, xi, &mut phase)?;
        let zr = bound.encode(&mut tape, Branch::Common, xr, &mut phase)?;
        let real = bound.discriminate(&mut tape, zc, &mut phase)?;
        let fake = bound.discriminate(&mut tape, zr, &mut phase)?;
        let loss = adv_loss_d(&mut tape, real, fake)?;
        let value = tape.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(non_finite("discriminator loss", *epochs_done + 1));
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<_> = bound.vars(Group::Discriminator).iter().map(|&v| g.take(v)).collect();
        (value, grads)
    };
    discriminator_optimizer.step(model.params_mut(Group::Discriminator), &grads)?;
    Ok(value)
}

/// Step B. With `measure_d` the discriminator loss is evaluated on this
/// step's features (only needed when step A did not run).
fn encoder_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    x: &Tensor,
    x_rest: Option<&Tensor>,
    labels: &[usize],
    measure_d: bool,
) -> Result<LossRecord> {
    let TrainState {
        model,
        encoder_optimizer,
        rng,
        epochs_done,
        ..
    } = state;
    let mode = cfg.mode;
    let trainable: &[Group] = match mode {
        Mode::Both => &ENCODER_GROUPS,
        Mode::NoFc => &[Group::Specific, Group::Classifier],
        Mode::NoFs => &[Group::Common, Group::Classifier],
    };
    let (record, grads) = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, trainable);
        let xi = tape.leaf(x, false);
        let mut phase = Phase::Train(rng);
        let zc = match mode.uses_common() {
            true => Some(bound.encode(&mut tape, Branch::Common, xi, &mut phase)?),
            false => None,
        };
        let zs = match mode.uses_specific() {
            true => Some(bound.encode(&mut tape, Branch::Specific, xi, &mut phase)?),
            false => None,
        };
        let (a, b) = classifier_pair(mode, zc, zs);
        let logits = bound.classify(&mut tape, a, b, &mut phase)?;
        let l_cls = cls_loss(&mut tape, logits, labels)?;
        let mut record = LossRecord { lambda: cfg.lambda, ..LossRecord::default() };
        let total = match (zc, x_rest) {
            (Some(zc), Some(xr)) => {
                let xr = tape.leaf(xr, false);
                let zr = bound.encode(&mut tape, Branch::Common, xr, &mut phase)?;
                let fake = bound.discriminate(&mut tape, zr, &mut phase)?;
                let l_adv = adv_loss_fc(&mut tape, fake)?;
                if measure_d {
                    let real = bound.discriminate(&mut tape, zc, &mut phase)?;
                    let l_d = adv_loss_d(&mut tape, real, fake)?;
                    record.l_adv_d = tape.value(l_d).item().expect("scalar");
                }
                record.l_adv_fc = tape.value(l_adv).item().expect("scalar");
                match zs {
                    Some(zs) => {
                        let l_diff = diff_loss(&mut tape, zc, zs)?;
                        record.l_diff = tape.value(l_diff).item().expect("scalar");
                        total_loss(&mut tape, l_cls, l_adv, l_diff, cfg.lambda)?
                    }
                    None => tape.add(l_cls, l_adv)?,
                }
            }
            _ => l_cls,
        };
        record.l_cls = tape.value(l_cls).item().expect("scalar");
        record.l_all = tape.value(total).item().expect("scalar");
        if !record.l_all.is_finite() {
            return Err(non_finite("training loss", *epochs_done + 1));
        }
        let mut g = tape.backward(total)?;
        let grads: Vec<_> = ENCODER_GROUPS
            .iter()
            .flat_map(|&grp| bound.vars(grp).iter().map(|&v| g.take(v)).collect::<Vec<_>>())
            .collect();
        (record, grads)
    };
    encoder_optimizer.step(model.params_mut_many(&ENCODER_GROUPS), &grads)?;
    Ok(record)
}
