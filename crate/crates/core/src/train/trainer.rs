use std::borrow::Cow;
use std::time::Instant;

use log::{debug, info, warn};

use crate::data::{normalize_into, resize_dataset, smooth_labels, AugmentConfig, ChannelStats, Dataset, FlipCrop, MixupDraw};
use crate::error::{Error, Result};
use crate::model::{count_forward_flops, Linear, MlpModel};
use crate::optim::{clip_global_norm, Optimizer};
use crate::tensor::{Scalar, SeededRng, Tensor};
use crate::train::config::{TrainConfig, TrainMode};
use crate::train::loss::{argmax_rows, cross_entropy_smoothed};
use crate::train::metrics::MetricsRecord;

// Stream tags for SeededRng::derived. Every random draw in training is keyed
// by (seed, tag, epoch, batch) so a run can be resumed mid-way.
pub(crate) const TAG_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const TAG_BATCH: u64 = 0x4241_5443;
pub(crate) const TAG_HEAD: u64 = 0x4845_4144;
pub(crate) const TAG_INIT: u64 = 0x494e_4954;

const EVAL_CHUNK: usize = 512;

/// A prepared minibatch: normalized (and possibly augmented) inputs, soft
/// targets and the original labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub targets: Vec<T>,
    pub labels: Vec<u32>,
}

/// Normalizes, augments and labels the examples at `indices`. Order of random
/// draws: per-image flip/crop in batch order, then the MixUp draw.
pub fn prepare_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    augment: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<Batch<T>> {
    let d = ds.image_len();
    let b = indices.len();
    let dims = (ds.height, ds.width, ds.channels);
    let mut inputs = vec![T::zero(); b * d];
    let mut scratch = vec![T::zero(); d];
    for (row, &i) in inputs.chunks_exact_mut(d).zip(indices) {
        if augment.spatial() {
            normalize_into(ds.image(i), stats, &mut scratch)?;
            FlipCrop::draw(augment.flip, augment.crop_pad, rng).apply(&scratch, dims, row);
        } else {
            normalize_into(ds.image(i), stats, row)?;
        }
    }
    let labels: Vec<u32> = indices.iter().map(|&i| ds.labels[i]).collect();
    let mut targets = smooth_labels(&labels, augment.label_smoothing, ds.num_classes)?;
    if augment.mixup_alpha > 0.0 {
        if b >= 2 {
            MixupDraw::draw(b, augment.mixup_alpha, rng)?.apply(&mut inputs, &mut targets)?;
        } else {
            debug!("batch of one left unmixed");
        }
    }
    Ok(Batch {
        inputs: Tensor::from_vec(&[b, d], inputs)?,
        targets,
        labels,
    })
}

fn check_dataset<T: Scalar>(model: &MlpModel<T>, ds: &Dataset) -> Result<()> {
    let input = model.config().input;
    if (ds.height, ds.width, ds.channels) != (input.height, input.width, input.channels) {
        return Err(Error::ShapeMismatch {
            left: vec![ds.height, ds.width, ds.channels],
            right: vec![input.height, input.width, input.channels],
        });
    }
    if ds.num_classes > model.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model head has {}",
            ds.num_classes,
            model.config().num_classes
        )));
    }
    Ok(())
}

/// Brings `ds` to the model's input resolution, resizing when allowed.
pub fn match_resolution<'a, T: Scalar>(model: &MlpModel<T>, ds: &'a Dataset, auto_resize: bool) -> Result<Cow<'a, Dataset>> {
    let input = model.config().input;
    if ds.channels != input.channels {
        return Err(Error::ShapeMismatch {
            left: vec![ds.height, ds.width, ds.channels],
            right: vec![input.height, input.width, input.channels],
        });
    }
    if (ds.height, ds.width) == (input.height, input.width) {
        return Ok(Cow::Borrowed(ds));
    }
    if !auto_resize {
        return Err(Error::ShapeMismatch {
            left: vec![ds.height, ds.width, ds.channels],
            right: vec![input.height, input.width, input.channels],
        });
    }
    info!(
        "resizing {}x{} inputs to {}x{}",
        ds.height, ds.width, input.height, input.width
    );
    Ok(Cow::Owned(resize_dataset(ds, input.height, input.width)?))
}

fn normalized_chunk<T: Scalar>(ds: &Dataset, start: usize, end: usize, stats: &ChannelStats) -> Result<Tensor<T>> {
    let d = ds.image_len();
    let mut data = vec![T::zero(); (end - start) * d];
    normalize_into(&ds.images[start * d..end * d], stats, &mut data)?;
    Tensor::from_vec(&[end - start, d], data)
}

/// Top-1 error with normalization only, no augmentation and no dropout.
pub fn evaluate<T: Scalar>(model: &MlpModel<T>, ds: &Dataset, stats: &ChannelStats) -> Result<f64> {
    check_dataset(model, ds)?;
    if ds.is_empty() {
        return Ok(0.0);
    }
    let k = model.config().num_classes;
    let mut wrong = 0usize;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let x = normalized_chunk::<T>(ds, start, end, stats)?;
        let feats = model.features(&x)?;
        let logits = model.params().head.forward(feats.data(), end - start)?;
        let pred = argmax_rows(&logits, k);
        wrong += pred.iter().zip(&ds.labels[start..end]).filter(|(p, l)| **p != **l as usize).count();
    }
    Ok(wrong as f64 / ds.len() as f64)
}

/// Mean smoothed cross entropy over `ds` without augmentation or dropout.
pub fn mean_loss<T: Scalar>(model: &MlpModel<T>, ds: &Dataset, stats: &ChannelStats, label_smoothing: f64) -> Result<f64> {
    check_dataset(model, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot average a loss over an empty dataset"));
    }
    let k = model.config().num_classes;
    let mut total = 0.0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let x = normalized_chunk::<T>(ds, start, end, stats)?;
        let feats = model.features(&x)?;
        let logits = Tensor::from_vec(&[end - start, k], model.params().head.forward(feats.data(), end - start)?)?;
        let targets = smooth_labels::<T>(&ds.labels[start..end], label_smoothing, k)?;
        total += cross_entropy_smoothed(&logits, &targets)?.0 * (end - start) as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Final-block outputs (`N x m`) for every example, in dataset order.
pub fn extract_features<T: Scalar>(model: &MlpModel<T>, ds: &Dataset, stats: &ChannelStats) -> Result<Tensor<T>> {
    let input = model.config().input;
    if (ds.height, ds.width, ds.channels) != (input.height, input.width, input.channels) {
        return Err(Error::ShapeMismatch {
            left: vec![ds.height, ds.width, ds.channels],
            right: vec![input.height, input.width, input.channels],
        });
    }
    let m = model.config().width;
    let mut out = Vec::with_capacity(ds.len() * m);
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let x = normalized_chunk::<T>(ds, start, end, stats)?;
        out.extend_from_slice(model.features(&x)?.data());
    }
    Tensor::from_vec(&[ds.len(), m], out)
}

/// Owns a model and its optimizer state for one training protocol.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    model: MlpModel<T>,
    optimizer: Optimizer<T>,
    config: TrainConfig,
    stats: ChannelStats,
    epoch: usize,
    cum_flops: u128,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: MlpModel<T>, config: TrainConfig, stats: ChannelStats) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        if stats.channels() != model.config().input.channels {
            return Err(Error::InvalidConfig(format!(
                "normalization has {} channels, model expects {}",
                stats.channels(),
                model.config().input.channels
            )));
        }
        let optimizer = Optimizer::new(config.optimizer);
        Ok(Self {
            model,
            optimizer,
            config,
            stats,
            epoch: 0,
            cum_flops: 0,
        })
    }

    /// Restores the state captured by [`Trainer::checkpoint`]. The optimizer
    /// hyperparameters come from `config`; its slots come from the checkpoint.
    pub fn resume(
        model: MlpModel<T>,
        optimizer_state: std::collections::BTreeMap<String, Tensor<T>>,
        config: TrainConfig,
        stats: ChannelStats,
        epoch: usize,
        cum_flops: u128,
    ) -> Result<Self> {
        let mut t = Self::new(model, config, stats)?;
        t.optimizer.set_state(optimizer_state);
        t.epoch = epoch;
        t.cum_flops = cum_flops;
        Ok(t)
    }

    pub fn model(&self) -> &MlpModel<T> {
        &self.model
    }

    pub fn into_model(self) -> MlpModel<T> {
        self.model
    }

    pub fn optimizer(&self) -> &Optimizer<T> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn cum_flops(&self) -> u128 {
        self.cum_flops
    }

    /// One shuffled pass over `train`; the last partial batch is kept.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<MetricsRecord> {
        check_dataset(&self.model, train)?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let start = Instant::now();
        let seed = self.config.seed;
        let e = self.epoch as u64;
        let n = train.len();
        let bsz = self.config.batch_size;
        let steps = n.div_ceil(bsz);
        let k = self.model.config().num_classes;
        let order = SeededRng::derived(seed, &[TAG_SHUFFLE, e]).permutation(n);

        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for (step, idx) in order.chunks(bsz).enumerate() {
            let mut rng = SeededRng::derived(seed, &[TAG_BATCH, e, step as u64]);
            let batch = prepare_batch::<T>(train, idx, &self.stats, &self.config.augment, &mut rng)?;
            let (logits, cache) = self.model.forward_train(&batch.inputs, &mut rng)?;
            let (loss, dlogits) = cross_entropy_smoothed(&logits, &batch.targets)?;
            loss_sum += loss * idx.len() as f64;
            wrong += argmax_rows(logits.data(), k)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| **p != **l as usize)
                .count();
            let mut grads = self.model.backward(&cache, &dlogits)?;
            if let Some(max_norm) = self.config.grad_clip {
                clip_global_norm(&mut grads, max_norm)?;
            }
            let scale = self.config.lr_scale(self.epoch, step, steps);
            self.optimizer.step(self.model.params_mut(), &grads, scale)?;
        }

        self.epoch += 1;
        self.cum_flops += 3 * count_forward_flops(self.model.config()) as u128 * n as u128;
        let rec = MetricsRecord {
            epoch: self.epoch,
            train_loss: loss_sum / n as f64,
            train_err: wrong as f64 / n as f64,
            test_err: None,
            seconds: start.elapsed().as_secs_f64(),
            cum_flops: self.cum_flops,
        };
        if !rec.train_loss.is_finite() {
            return Err(Error::NonFinite(format!("train loss at epoch {}", rec.epoch)));
        }
        Ok(rec)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        evaluate(&self.model, ds, &self.stats)
    }

    fn due_for_eval(&self) -> bool {
        let every = self.config.eval_every;
        self.epoch >= self.config.epochs || (every > 0 && self.epoch.is_multiple_of(every))
    }

    /// Trains from the current epoch up to `config.epochs`, evaluating on
    /// `test` at the configured cadence. `on_epoch` sees each record as it is
    /// produced.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Self, &MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let mut rec = self.train_epoch(train)?;
            if let Some(test) = test.filter(|_| self.due_for_eval()) {
                rec.test_err = Some(self.evaluate(test)?);
            }
            rec.seconds = start.elapsed().as_secs_f64();
            info!(
                "epoch {}/{} loss {:.4} train_err {:.4} test_err {}",
                rec.epoch,
                self.config.epochs,
                rec.train_loss,
                rec.train_err,
                rec.test_err.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
            on_epoch(self, &rec)?;
            history.push(rec);
        }
        Ok(history)
    }
}

/// Result of training a linear classifier on frozen features.
#[derive(Debug, Clone)]
pub struct ProbeOutcome<T> {
    pub head: Linear<T>,
    pub train_err: f64,
    pub test_err: f64,
    pub history: Vec<MetricsRecord>,
}

fn head_error<T: Scalar>(head: &Linear<T>, feats: &Tensor<T>, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = head.forward(feats.data(), feats.rows())?;
    let pred = argmax_rows(&logits, head.out_dim());
    let wrong = pred.iter().zip(labels).filter(|(p, l)| **p != **l as usize).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Top-1 error of `head` applied to the frozen features of `model`.
pub fn probe_error<T: Scalar>(model: &MlpModel<T>, head: &Linear<T>, ds: &Dataset, stats: &ChannelStats) -> Result<f64> {
    if head.in_dim() != model.config().width {
        return Err(Error::ShapeMismatch {
            left: vec![head.out_dim(), head.in_dim()],
            right: vec![head.out_dim(), model.config().width],
        });
    }
    let feats = extract_features(model, ds, stats)?;
    head_error(head, &feats, &ds.labels)
}

/// Trains a fresh `K' x m` head on frozen final-block features. The body is
/// only borrowed, so it cannot change. Normalization statistics come from
/// `train`; inputs are resized to the model resolution when allowed.
pub fn linear_probe<T: Scalar>(
    model: &MlpModel<T>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<ProbeOutcome<T>> {
    config.validate()?;
    if config.augment.spatial() {
        return Err(Error::InvalidConfig("probe trains on precomputed features; flip/crop cannot apply".into()));
    }
    let train = match_resolution(model, train, config.auto_resize)?;
    let test = match_resolution(model, test, config.auto_resize)?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let stats = ChannelStats::compute(&train)?;
    let train_feats = extract_features(model, &train, &stats)?;
    let test_feats = extract_features(model, &test, &stats)?;
    let m = model.config().width;
    let k = train.num_classes;
    let mut head = Linear::init(k, m, &mut SeededRng::derived(config.seed, &[TAG_HEAD]))?;
    let mut grad = Linear::zeros(k, m);
    let mut opt = Optimizer::<T>::new(config.optimizer);
    let n = train.len();
    let bsz = config.batch_size;
    let steps = n.div_ceil(bsz);
    let mut history = Vec::with_capacity(config.epochs);
    let mut cum_flops = 0u128;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = SeededRng::derived(config.seed, &[TAG_SHUFFLE, epoch as u64]).permutation(n);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for (step, idx) in order.chunks(bsz).enumerate() {
            let mut rng = SeededRng::derived(config.seed, &[TAG_BATCH, epoch as u64, step as u64]);
            let mut x = Vec::with_capacity(idx.len() * m);
            for &i in idx {
                x.extend_from_slice(&train_feats.data()[i * m..(i + 1) * m]);
            }
            let labels: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut targets = smooth_labels::<T>(&labels, config.augment.label_smoothing, k)?;
            if config.augment.mixup_alpha > 0.0 && idx.len() >= 2 {
                MixupDraw::draw(idx.len(), config.augment.mixup_alpha, &mut rng)?.apply(&mut x, &mut targets)?;
            }
            let logits = Tensor::from_vec(&[idx.len(), k], head.forward(&x, idx.len())?)?;
            let (loss, dlogits) = cross_entropy_smoothed(&logits, &targets)?;
            loss_sum += loss * idx.len() as f64;
            wrong += argmax_rows(logits.data(), k)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| **p != **l as usize)
                .count();
            head.backward(&x, dlogits.data(), idx.len(), &mut grad, false)?;
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grad, max_norm)?;
            }
            opt.step(&mut head, &grad, config.lr_scale(epoch, step, steps))?;
        }
        cum_flops += 3 * (k * m) as u128 * n as u128;
        let last = epoch + 1 == config.epochs;
        let due = last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0);
        let test_err = if due { Some(head_error(&head, &test_feats, &test.labels)?) } else { None };
        history.push(MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_err: wrong as f64 / n as f64,
            test_err,
            seconds: start.elapsed().as_secs_f64(),
            cum_flops,
        });
    }
    Ok(ProbeOutcome {
        train_err: head_error(&head, &train_feats, &train.labels)?,
        test_err: head_error(&head, &test_feats, &test.labels)?,
        head,
        history,
    })
}

/// Result of fine-tuning all parameters on a downstream task.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Scalar> {
    pub model: MlpModel<T>,
    pub stats: ChannelStats,
    pub test_err: f64,
    pub history: Vec<MetricsRecord>,
}

/// Replaces the head for the downstream class count and trains every
/// parameter. Inputs are resized to the pretrained resolution when allowed.
pub fn fine_tune<T: Scalar>(
    pretrained: &MlpModel<T>,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    if config.mode != TrainMode::Finetune {
        warn!("fine-tuning with a {} config", config.mode.name());
    }
    let train = match_resolution(pretrained, train, config.auto_resize)?;
    let test = match_resolution(pretrained, test, config.auto_resize)?;
    let mut model = pretrained.clone();
    model.replace_head(train.num_classes, &mut SeededRng::derived(config.seed, &[TAG_HEAD]))?;
    let stats = ChannelStats::compute(&train)?;
    let mut trainer = Trainer::new(model, config.clone(), stats)?;
    let history = trainer.fit(&train, Some(&test), |_, _| Ok(()))?;
    let test_err = match history.last().and_then(|r| r.test_err) {
        Some(e) => e,
        None => trainer.evaluate(&test)?,
    };
    let stats = trainer.stats().clone();
    Ok(FinetuneOutcome {
        model: trainer.into_model(),
        stats,
        test_err,
        history,
    })
}

/// Builds a fresh model for `config` from the run seed.
pub fn init_model<T: Scalar>(model: crate::model::ModelConfig, seed: u64) -> Result<MlpModel<T>> {
    MlpModel::new(model, &mut SeededRng::derived(seed, &[TAG_INIT]))
}
