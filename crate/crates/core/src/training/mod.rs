//! Focal-loss training loop, augmentation, optimizers and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_batch, masks_to_targets, BinaryMask, Sample};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ParamId, ParamKind, MASK_THRESHOLD};
use crate::region::{aggregate, compare_masks};
use crate::rng::{stream_id, stream_rng};
use crate::tensor::{relative_error, Real, Tape, Tensor, Var};
pub use augment::{augment, AugmentConfig, AugmentDecision};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointError,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Focal loss `-alpha_t (1 - p_t)^gamma ln(p_t)`, averaged over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalLossParams {
    /// Foreground weight; background gets `1 - alpha`. `None` weights both
    /// classes by 1.
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        FocalLossParams {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

impl FocalLossParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("focal alpha {a} outside [0, 1]")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// Records the focal loss of `probs [N,1,H,W]` against `targets` (one mask
/// per batch element).
pub fn focal_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: &[&BinaryMask], params: &FocalLossParams) -> Result<Var> {
    params.validate()?;
    let shape = tape.shape(probs).to_vec();
    let ok = match shape[..] {
        [n, 1, h, w] => n == targets.len() && targets.iter().all(|m| m.dims() == (h, w)),
        _ => false,
    };
    if !ok {
        let first = targets.first().map(|m| m.dims()).unwrap_or((0, 0));
        return Err(Error::shape("focal_loss", &shape, &[targets.len(), 1, first.0, first.1]));
    }
    tape.focal_loss(probs, &masks_to_targets(targets), params.alpha, params.gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    /// Recompute batch-norm running statistics from the (unaugmented)
    /// training split at the end of every epoch.
    pub recalibrate_batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 7,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            recalibrate_batch_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.augment.rotation_degrees >= 0.0 && self.augment.rotation_degrees <= 180.0) {
            return Err(Error::Config("rotation_degrees must lie in [0, 180]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean focal loss over the epoch's batches.
    pub loss: f64,
    /// Mean per-image IoU on the validation split, if one was given.
    pub val_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_val_iou(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.val_iou)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_iou\n");
        for r in &self.rows {
            let v = r.val_iou.map(|v| format!("{v:.17}")).unwrap_or_default();
            s.push_str(&format!("{},{:.17},{}\n", r.epoch, r.loss, v));
        }
        s
    }
}

/// Binary masks predicted one image at a time in eval mode.
///
/// Single-image batches make the result independent of how callers group
/// images, so validation during training and later prediction agree exactly.
pub fn predict_masks<T: Real>(model: &Model<T>, samples: &[&crate::data::RgbImage]) -> Result<Vec<BinaryMask>> {
    samples
        .iter()
        .map(|img| {
            let batch = images_to_batch::<T>(&[img])?;
            let p = model.predict(&batch, false)?;
            let (h, w) = img.dims();
            BinaryMask::from_probs(h, w, p.probs.data(), MASK_THRESHOLD)
        })
        .collect()
}

/// Mean per-image IoU of `model` predictions on `samples`.
pub fn evaluate_iou<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &imgs)?;
    let reports = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| compare_masks(&s.mask, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&reports)?.iou)
}

/// Loss value, gradients by parameter slot, and batch-norm statistic updates.
pub type LossAndGradients<T> = (f64, Vec<(ParamId, Vec<T>)>, Vec<crate::model::StatUpdate<T>>);

/// Records forward + loss for one batch and returns `(loss, gradients by slot)`.
pub fn loss_and_gradients<T: Real>(
    model: &Model<T>,
    images: &[&crate::data::RgbImage],
    masks: &[&BinaryMask],
    focal: &FocalLossParams,
) -> Result<LossAndGradients<T>> {
    let mut tape = Tape::new();
    let batch = tape.leaf(&images_to_batch::<T>(images)?);
    let out = model.forward(&mut tape, batch, Mode::Train, false)?;
    let loss = focal_loss(&mut tape, out.probs, masks, focal)?;
    let value = tape.value(loss)[0].as_f64();
    let grads = tape.backward(loss)?;
    let by_slot = grads
        .tagged()
        .map(|(tag, g)| (ParamId(tag), g.to_vec()))
        .collect();
    Ok((value, by_slot, out.stat_updates))
}

/// Stateful trainer; [`train`] is the one-shot wrapper.
pub struct Trainer<'m> {
    pub model: &'m mut Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub config: TrainConfig,
    pub focal: FocalLossParams,
    pub epoch: usize,
    pub log: TrainLog,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model<f32>, config: TrainConfig, focal: FocalLossParams) -> Result<Self> {
        config.validate()?;
        focal.validate()?;
        let optimizer = Optimizer::new(config.optimizer, &model.params)?;
        Ok(Trainer {
            model,
            optimizer,
            config,
            focal,
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    /// One pass over `train`, then validation IoU on `val` when non-empty.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<&EpochRecord> {
        if train.is_empty() {
            return Err(Error::Empty("training split has no samples".into()));
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seed, stream_id(0, epoch as u64, 0)));

        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let augmented: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = stream_rng(seed, stream_id(1, epoch as u64, i as u64));
                    augment(&train[i].image, &train[i].mask, &self.config.augment, &mut rng)
                })
                .collect();
            let imgs: Vec<_> = augmented.iter().map(|(i, _)| i).collect();
            let masks: Vec<_> = augmented.iter().map(|(_, m)| m).collect();
            let (loss, grads, stats) = loss_and_gradients(self.model, &imgs, &masks, &self.focal)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            self.optimizer
                .step(&mut self.model.params, grads.iter().map(|(id, g)| (*id, g.as_slice())));
            self.model.apply_stat_updates(&stats);
            if !self.model.params.iter().all(|(_, p)| p.tensor.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss: f64::NAN });
            }
            total += loss;
            batches += 1;
        }
        if self.config.recalibrate_batch_norm {
            recalibrate_batch_norm(self.model, train, self.config.batch_size)?;
        }
        let val_iou = if val.is_empty() {
            None
        } else {
            Some(evaluate_iou(self.model, val)?)
        };
        self.log.rows.push(EpochRecord {
            epoch,
            loss: total / batches as f64,
            val_iou,
        });
        Ok(self.log.rows.last().expect("just pushed"))
    }
}

/// Replaces every batch-norm layer's running statistics with the average
/// of its batch statistics over `samples`, using the current weights.
///
/// Momentum averaging lags behind weights that are still moving; this
/// makes eval-mode normalisation match the final parameters. Variances are
/// stored biased, i.e. exactly as the layer normalised during training,
/// which matters for the small deep feature maps.
pub fn recalibrate_batch_norm<T: Real>(model: &mut Model<T>, samples: &[Sample], batch_size: usize) -> Result<()> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Empty("batch-norm recalibration needs samples".into()));
    }
    let mut sums: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut weight = 0.0;
    for chunk in samples.chunks(batch_size) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let batch = tape.leaf(&images_to_batch::<T>(&imgs)?);
        let out = model.forward(&mut tape, batch, Mode::Train, false)?;
        let w = chunk.len() as f64;
        weight += w;
        for (k, u) in out.stat_updates.iter().enumerate() {
            if sums.len() <= k {
                sums.push((u.running_mean, u.running_var, vec![0.0; u.batch.mean.len()], vec![0.0; u.batch.var.len()]));
            }
            let (_, _, m, v) = &mut sums[k];
            m.iter_mut().zip(&u.batch.mean).for_each(|(a, b)| *a += w * b.as_f64());
            let unbias = if u.count > 1 { (u.count - 1) as f64 / u.count as f64 } else { 1.0 };
            v.iter_mut().zip(&u.batch.var).for_each(|(a, b)| *a += w * b.as_f64() * unbias);
        }
    }
    for (mean_id, var_id, m, v) in sums {
        for (id, acc) in [(mean_id, m), (var_id, v)] {
            let t = model.params.tensor_mut(id);
            t.data_mut().iter_mut().zip(acc).for_each(|(dst, a)| *dst = T::of_f64(a / weight));
        }
    }
    Ok(())
}

/// Trains for `config.epochs` epochs and returns the per-epoch log.
pub fn train(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    focal: &FocalLossParams,
) -> Result<TrainLog> {
    let mut t = Trainer::new(model, config.clone(), *focal)?;
    for _ in 0..config.epochs {
        t.run_epoch(train, val)?;
    }
    Ok(t.log)
}

/// Compares tape gradients of the training loss with central finite
/// differences on `samples` randomly chosen learnable scalars; returns the
/// worst relative error.
pub fn parameter_gradient_check(
    model: &Model<f64>,
    images: &[&crate::data::RgbImage],
    masks: &[&BinaryMask],
    focal: &FocalLossParams,
    samples: usize,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    use rand::Rng;
    let (_, grads, _) = loss_and_gradients(model, images, masks, focal)?;
    let weights: Vec<(ParamId, usize)> = model
        .params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id, i)))
        .collect();
    if weights.is_empty() {
        return Err(Error::Empty("model has no learnable parameters".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (id, i) = weights[rng.random_range(0..weights.len())];
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g[i])
            .unwrap_or(0.0);
        let orig = model.params.tensor(id).data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.params.tensor_mut(id).data_mut()[i] = v;
            let (l, _, _) = loss_and_gradients(&probe, images, masks, focal)?;
            Ok(l)
        };
        let numeric = (eval(orig + eps)? - eval(orig - eps)?) / (2.0 * eps);
        probe.params.tensor_mut(id).data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Gradient of the focal loss with respect to probabilities, checked
/// against finite differences; exposed for self-tests.
pub fn focal_gradient_check(probs: &Tensor<f64>, target: &[bool], focal: &FocalLossParams) -> Result<f64> {
    crate::tensor::finite_diff_check(|t, p| t.focal_loss(p, target, focal.alpha, focal.gamma), probs, 1e-7)
}

#[cfg(test)]
mod tests;
