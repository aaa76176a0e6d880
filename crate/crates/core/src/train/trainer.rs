use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::autodiff::{ParamStore, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::impartiality::ResolverBank;
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Restore the parameters of the best validation epoch at the end.
    pub restore_best: bool,
}

impl TrainConfig {
    /// Batch size 128, learning rate 1e-3; AMSGrad on for mixture models.
    pub fn for_model(model: &Model, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            optimizer: AdamConfig {
                amsgrad: model.kind().is_mixture(),
                ..AdamConfig::default()
            },
            seed,
            validate_every: 1,
            restore_best: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective (the bound) over applied steps.
    pub train_bound: f64,
    pub val_metric: Option<f64>,
    pub skipped_steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Lowest validation metric seen.
    pub best_metric: Option<f64>,
    pub skipped_steps: usize,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean wall-clock seconds per epoch, training only.
    pub fn seconds_per_epoch(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|e| e.seconds).sum::<f64>() / self.history.len() as f64
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_bound", "val_metric", "skipped_steps", "seconds"])?;
        for e in &self.history {
            w.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_bound),
                e.val_metric.map(|v| format!("{v}")).unwrap_or_default(),
                e.skipped_steps.to_string(),
                format!("{:.6}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Negated mean bound over `data` in evaluation mode; lower is better.
pub fn validation_loss(model: &mut Model, data: &Batch, batch_size: usize, seed: u64) -> Result<f64> {
    let (mut total, mut rows) = (0.0, 0usize);
    for (i, chunk) in data.chunks(batch_size.max(1)).into_iter().enumerate() {
        let mut tape = Tape::new(seed.wrapping_add(i as u64));
        tape.set_training(false);
        let out = model.loss(&mut tape, &chunk)?;
        total -= out.bound * chunk.rows() as f64;
        rows += chunk.rows();
    }
    if rows == 0 {
        return Err(Error::invalid("validation data is empty"));
    }
    Ok(total / rows as f64)
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Resolver { .. } | Error::Singular(_))
}

/// Minibatch training with per-epoch validation.
///
/// `validate` maps the current model to a metric where lower is better.
/// Steps whose loss or gradients are not finite (or whose resolver fails)
/// are skipped and counted.
pub fn fit(
    model: &mut Model,
    train: &Batch,
    cfg: &TrainConfig,
    validate: Option<&mut dyn FnMut(&mut Model) -> Result<f64>>,
) -> Result<TrainReport> {
    if train.rows() == 0 {
        return Err(Error::invalid("training data is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut validate = validate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.optimizer);
    let mut bank = (!model.inventory().is_empty()).then(|| ResolverBank::new(model.inventory(), cfg.seed));
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<ParamStore> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut bound_sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.select(idx);
            let mut tape = Tape::new(rng.next_u64());
            let out = model.loss(&mut tape, &batch)?;
            if !out.bound.is_finite() {
                skipped += 1;
                continue;
            }
            let grads = match bank.as_mut() {
                Some(b) => tape.backward_with(out.loss, b),
                None => tape.backward(out.loss),
            };
            let grads = match grads {
                Ok(g) if g.is_finite() => g,
                Ok(_) => {
                    skipped += 1;
                    continue;
                }
                Err(e) if skippable(&e) => {
                    log::debug!("epoch {epoch}: skipped step ({e})");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            optimizer.step(model.params_mut(), &grads);
            bound_sum += out.bound;
            applied += 1;
        }
        let seconds = t0.elapsed().as_secs_f64();
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} non-finite steps");
        }
        let due = epoch % cfg.validate_every.max(1) == 0 || epoch == cfg.epochs;
        let val_metric = match validate.as_mut() {
            Some(f) if due => Some(f(model)?),
            _ => None,
        };
        if let Some(v) = val_metric.filter(|v| v.is_finite()) {
            if report.best_metric.is_none_or(|b| v < b) {
                report.best_metric = Some(v);
                report.best_epoch = Some(epoch);
                if cfg.restore_best {
                    best = Some(model.params().clone());
                }
            }
        }
        report.skipped_steps += skipped;
        report.steps += applied;
        report.history.push(EpochRecord {
            epoch,
            train_bound: if applied > 0 { bound_sum / applied as f64 } else { f64::NAN },
            val_metric,
            skipped_steps: skipped,
            seconds,
        });
    }
    if let Some(b) = best {
        *model.params_mut() = b;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
