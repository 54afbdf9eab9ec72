//! AdamW with global-norm clipping, the epoch loop, Dice-gated
//! checkpointing and the checkpoint file format.

mod checkpoint;
mod optim;

pub use checkpoint::{
    config_text, decode, encode, load_checkpoint, parse_config, save_checkpoint, MAGIC, VERSION,
};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, OptimConfig, OptimState};

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{collate, resize, Augment, Dataset};
use crate::error::{Error, Result};
use crate::network::UCycleMLP;
use crate::objectives::{self, label_classes, logits_to_labels, mean_dice_from_counts, ConfusionCounts, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainReport {
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Confusion counts aggregated over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    /// Mean DSC over foreground classes.
    pub mean_dice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
    pub saved: bool,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} loss {:.6} val_dice {:.6} saved {}",
            self.epoch,
            self.loss,
            self.val_dice,
            u8::from(self.saved)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub best_dice: f64,
}

/// Resizes every sample to `size` (no-op for samples already that size).
pub fn prepare(data: &Dataset, size: (usize, usize)) -> Result<Dataset> {
    Ok(Dataset {
        samples: data
            .samples
            .iter()
            .map(|s| resize(s, size.0, size.1))
            .collect::<Result<_>>()?,
        num_classes: data.num_classes,
    })
}

fn check_labels(model: &UCycleMLP<f32>, data: &Dataset) -> Result<()> {
    let classes = label_classes(model.config().num_classes);
    if data.num_classes > classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {classes}",
            data.num_classes
        )));
    }
    Ok(())
}

/// One pass over `data` in a seeded random order: augment, forward, loss,
/// backward, clip, AdamW step.
pub fn train_epoch(
    model: &mut UCycleMLP<f32>,
    data: &Dataset,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    state: &mut OptimState,
    augment: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Contract("train_epoch on an empty dataset".into()));
    }
    check_labels(model, data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(optim.batch_size) {
        let augmented: Vec<_> = batch.iter().map(|&i| augment.apply(&data.samples[i], rng)).collect();
        let refs: Vec<_> = augmented.iter().collect();
        let (images, labels) = collate(&refs)?;
        let dropout_seed = rng.gen();
        let back = {
            let (arch, mut f) = model.session(true, dropout_seed);
            let x = f.input(images, false);
            let logits = arch.forward(&mut f, x)?;
            let loss = objectives::loss(&mut f.graph, logits, &labels, loss_cfg)?;
            let value = f.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += value * batch.len() as f64;
            f.backward(loss)?
        };
        model.params.zero_grad();
        back.accumulate_into(&mut model.params)?;
        clip_grad_norm(&mut model.params, optim.clip_max_norm);
        adamw_step(&mut model.params, state, optim);
        steps += 1;
    }
    Ok(TrainReport {
        mean_loss: total / data.len() as f64,
        steps,
    })
}

/// Eval-mode predictions over `data`, with counts aggregated across samples.
pub fn evaluate(model: &mut UCycleMLP<f32>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    check_labels(model, data)?;
    let classes = label_classes(model.config().num_classes);
    let mut counts = ConfusionCounts::new(classes);
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (images, labels) = collate(&refs)?;
        let logits = model.predict(&images)?;
        let pred = logits_to_labels(&logits);
        counts.merge(&objectives::confusion(&pred, &labels, classes)?);
    }
    let mean_dice = mean_dice_from_counts(&counts, true);
    Ok(EvalReport { counts, mean_dice })
}

/// Scores `val` and saves a checkpoint to `ckpt` only when the mean Dice
/// strictly beats `*best`, which is then raised. Returns `(dice, saved)`.
pub fn validate_and_gate(
    model: &mut UCycleMLP<f32>,
    val: &Dataset,
    best: &mut f64,
    ckpt: Option<&Path>,
    batch_size: usize,
) -> Result<(f64, bool)> {
    let dice = evaluate(model, val, batch_size)?.mean_dice;
    Ok((dice, gate(model, dice, best, ckpt)?))
}

/// The gating rule on its own: strict improvement saves.
pub fn gate(model: &UCycleMLP<f32>, score: f64, best: &mut f64, ckpt: Option<&Path>) -> Result<bool> {
    if score > *best {
        *best = score;
        if let Some(path) = ckpt {
            save_checkpoint(path, model, score)?;
        }
        return Ok(true);
    }
    Ok(false)
}

/// Runs `optim.epochs` epochs. Validation falls back to the training set when
/// `val` is empty. `on_epoch` sees each log line and may stop the run early.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut UCycleMLP<f32>,
    train: &Dataset,
    val: &Dataset,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    ckpt: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<FitReport> {
    optim.validate()?;
    loss_cfg.validate()?;
    let size = model.config().input_size;
    let train = prepare(train, size)?;
    let val = if val.is_empty() { train.clone() } else { prepare(val, size)? };
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut state = OptimState::new();
    let augment = Augment::default();
    let mut best = f64::NEG_INFINITY;
    let mut epochs = Vec::new();
    for epoch in 1..=optim.epochs {
        let report = train_epoch(model, &train, loss_cfg, optim, &mut state, &augment, &mut rng)?;
        let (val_dice, saved) = validate_and_gate(model, &val, &mut best, ckpt, optim.batch_size)?;
        let log = EpochLog {
            epoch,
            loss: report.mean_loss,
            val_dice,
            saved,
        };
        epochs.push(log);
        if on_epoch(&log).is_break() {
            break;
        }
    }
    Ok(FitReport {
        epochs,
        best_dice: best,
    })
}

/// Loss regime matching the head: BCE + Focal for one logit, hybrid
/// CE + Dice otherwise.
pub fn default_loss(num_classes: usize) -> LossConfig {
    LossConfig {
        mode: if num_classes == 1 {
            objectives::LossMode::BceFocal
        } else {
            objectives::LossMode::HybridCeDice
        },
        ..LossConfig::default()
    }
}
