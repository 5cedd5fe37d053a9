//! Mini-batch Adam training with plateau LR reduction and early stopping,
//! plus the per-batch fine-tuning procedure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::emgio::LabeledWindow;
use crate::nnkernels::{adam_step, softmax_cross_entropy, AdamConfig, AdamState, BnMode, KernelError};
use crate::seed;
use crate::speechnet::{argmax, ModelError, SpeechNet};

/// Windows per class a fine-tuning batch must provide.
pub const FINE_TUNE_MIN_PER_CLASS: usize = 20;
/// Share of each class used for fine-tuning; the rest validates.
pub const FINE_TUNE_TRAIN_FRACTION: f64 = 0.7;
/// Share of each class kept for training when a validation set is carved out.
pub const CARVE_OUT_TRAIN_FRACTION: f64 = 0.85;

const EVAL_CHUNK: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("EmptyDataset: {0} set is empty")]
    EmptyDataset(&'static str),
    #[error("ClassUnderflow: class {class} has {count} windows, need {needed}")]
    ClassUnderflow { class: usize, count: usize, needed: usize },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("LabelOutOfRange: label {label} for a {classes}-class model")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("RaggedWindows: window of {found} samples in a set of {expected}")]
    RaggedWindows { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<KernelError> for TrainError {
    fn from(e: KernelError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 2, factor: 0.1, min_lr: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub restore_best: bool,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { patience: 10, restore_best: true }
    }
}

/// How batch normalization behaves while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Batch statistics, running averages updated.
    Update,
    /// Running statistics frozen; BN acts as a fixed affine map.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    /// Minimum absolute decrease in validation loss that counts as improvement.
    pub min_delta: f64,
    pub bn: BnPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            min_delta: 1e-4,
            bn: BnPolicy::Update,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for adapting a pretrained model: 50 epochs, frozen BN statistics.
    pub fn fine_tune() -> Self {
        Self { max_epochs: 50, bn: BnPolicy::Frozen, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be at least 1");
        }
        if self.plateau.patience == 0 || self.early_stop.patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.adam.lr < 0.0 || self.plateau.min_lr < 0.0 || self.min_delta < 0.0 {
            return bad("learning rates and min_delta must be non-negative");
        }
        Ok(())
    }
}

/// Counts non-improving epochs and reduces the learning rate once the count
/// reaches `patience`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    min_delta: f64,
    best: f64,
    bad: usize,
    lr: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, min_delta: f64, lr0: f64) -> Self {
        Self { cfg, min_delta, best: f64::INFINITY, bad: 0, lr: lr0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric and returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr.min(self.lr));
                self.bad = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, bad: 0 }
    }

    pub fn step(&mut self, metric: f64) -> StopSignal {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.bad = 0;
            StopSignal::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Mean recall over the classes present in `truth`.
pub fn balanced_accuracy_present(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let mut hit = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        total[t] += 1;
        hit[t] += usize::from(t == p);
    }
    let recalls: Vec<f64> =
        hit.iter().zip(&total).filter(|(_, &n)| n > 0).map(|(&h, &n)| h as f64 / n as f64).collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

fn check_set(model: &SpeechNet, set: &[&LabeledWindow], name: &'static str) -> Result<usize, TrainError> {
    let first = set.first().ok_or(TrainError::EmptyDataset(name))?;
    let t = first.len;
    for w in set {
        if w.len != t || w.data.len() != model.n_channels() * t {
            return Err(TrainError::RaggedWindows { expected: t, found: w.len });
        }
        if w.label.id() >= model.n_classes() {
            return Err(TrainError::LabelOutOfRange { label: w.label.id(), classes: model.n_classes() });
        }
    }
    Ok(t)
}

/// Eval-mode predictions and mean cross-entropy over a window set.
pub fn evaluate(model: &SpeechNet, set: &[&LabeledWindow]) -> Result<(f64, Vec<usize>), TrainError> {
    let t = check_set(model, set, "evaluation")?;
    let k = model.n_classes();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.chunks(EVAL_CHUNK) {
        let x = model.batch_tensor(chunk.iter().map(|w| &w.data[..]), t)?;
        let logits = model.forward_batch(&x)?;
        for (w, z) in chunk.iter().zip(logits.chunks_exact(k)) {
            loss += f64::from(softmax_cross_entropy(z, w.label.id())?.0);
            preds.push(argmax(z));
        }
    }
    Ok((loss / set.len() as f64, preds))
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(
    model: &mut SpeechNet,
    train_set: &[&LabeledWindow],
    val_set: &[&LabeledWindow],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let t = check_set(model, train_set, "training")?;
    let tv = check_set(model, val_set, "validation")?;
    if t != tv {
        return Err(TrainError::RaggedWindows { expected: t, found: tv });
    }
    let k = model.n_classes();
    let bn_mode = match cfg.bn {
        BnPolicy::Update => BnMode::Train,
        BnPolicy::Frozen => BnMode::Eval,
    };
    let mut adam = AdamState::new(cfg.adam, &model.param_lens());
    let mut plateau = PlateauScheduler::new(cfg.plateau, cfg.min_delta, cfg.adam.lr);
    let mut stopper = EarlyStopping::new(cfg.early_stop.patience, cfg.min_delta);
    let mut rng = seed::rng(cfg.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_truth: Vec<usize> = val_set.iter().map(|w| w.label.id()).collect();
    let mut history = TrainHistory::default();
    let mut best_model: Option<SpeechNet> = None;

    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr();
        adam.cfg.lr = lr;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // A single-sample batch has no batch variance; skip it unless it is all there is.
            if batch.len() < 2 && order.len() >= 2 && bn_mode == BnMode::Train {
                continue;
            }
            let x = model.batch_tensor(batch.iter().map(|&i| &train_set[i].data[..]), t)?;
            let (logits, record) = model.forward_train(&x, bn_mode)?;
            let n = batch.len();
            let mut dlogits = Vec::with_capacity(logits.len());
            for (&i, z) in batch.iter().zip(logits.chunks_exact(k)) {
                let (l, g) = softmax_cross_entropy(z, train_set[i].label.id())?;
                loss_sum += f64::from(l);
                dlogits.extend(g.into_iter().map(|v| v / n as f32));
            }
            seen += n;
            let grads = model.backward(&record, &dlogits)?;
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| &g[..]).collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut adam)?;
        }
        let (val_loss, preds) = evaluate(model, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss,
            val_balanced_accuracy: balanced_accuracy_present(&val_truth, &preds, k),
            lr,
        });
        plateau.step(val_loss);
        match stopper.step(val_loss) {
            StopSignal::Improved => {
                history.best_epoch = epoch;
                if cfg.early_stop.restore_best {
                    best_model = Some(model.clone());
                }
            }
            StopSignal::Continue => {}
            StopSignal::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        // Validation loss never finite-improved (e.g. NaN); treat the last epoch as best.
        history.best_epoch = history.epochs.len();
    }
    if let Some(best) = best_model {
        *model = best;
    }
    Ok(history)
}

/// Stratified split: each class contributes `round(train_fraction * n_c)`
/// windows to the first index list. Both lists are sorted.
pub fn stratified_split<T: crate::emgio::HasLabel>(
    items: &[T],
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(seed, "stratified_split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in crate::CommandLabel::ALL {
        let mut idx: Vec<usize> =
            items.iter().enumerate().filter(|(_, w)| w.label() == class).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Sizes of the fine-tuning split for one class of `n` windows.
pub fn fine_tune_split_sizes(n: usize) -> (usize, usize) {
    let n_train = (FINE_TUNE_TRAIN_FRACTION * n as f64).round() as usize;
    (n_train, n - n_train)
}

/// Adapts `model` to one new batch: stratified 70/30 split, then [`train`].
pub fn fine_tune(
    model: &mut SpeechNet,
    batch: &[&LabeledWindow],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    for class in 0..model.n_classes() {
        let count = batch.iter().filter(|w| w.label.id() == class).count();
        if count < FINE_TUNE_MIN_PER_CLASS {
            return Err(TrainError::ClassUnderflow { class, count, needed: FINE_TUNE_MIN_PER_CLASS });
        }
    }
    let (tr, va) = stratified_split(batch, FINE_TUNE_TRAIN_FRACTION, seed::derive(cfg.seed, "fine_tune/split"));
    let train_set: Vec<&LabeledWindow> = tr.iter().map(|&i| batch[i]).collect();
    let val_set: Vec<&LabeledWindow> = va.iter().map(|&i| batch[i]).collect();
    train(model, &train_set, &val_set, cfg)
}

impl crate::emgio::HasLabel for &LabeledWindow {
    fn label(&self) -> crate::CommandLabel {
        self.label
    }
}
