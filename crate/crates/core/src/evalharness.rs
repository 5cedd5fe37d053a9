//! Evaluation protocols: fold construction, per-fold training and testing,
//! the two incremental scenarios, metrics and the window-size ablation.
//!
//! Data flow per subject and condition: every batch recording is filtered,
//! segmented and rest-balanced once ([`SubjectData`]); windows of a given
//! length are then cut and z-scored on demand ([`WindowSet`]).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, DspError};
use crate::emgio::{
    balance_rest, extract_window, segment, BatchKey, EmgIoError, LabeledWindow, RecordingSource, Segment,
};
use crate::speechnet::{ModelError, SpeechNet, SpeechNetConfig};
use crate::training::{self, BnPolicy, TrainConfig, TrainError, TrainHistory};
use crate::{seed, CommandLabel, Condition};

/// Window sizes of the ablation grid, in ms.
pub const ABLATION_WINDOWS_MS: [u32; 6] = [400, 600, 800, 1000, 1200, 1400];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("IncompleteManifest: missing ({0})")]
    IncompleteManifest(BatchKey),
    #[error("NoData: {0}")]
    NoData(String),
    #[error("EmptyInput: no predictions to score")]
    EmptyInput,
    #[error("MissingClass: class {0} absent from the labels")]
    MissingClass(usize),
    #[error("LengthMismatch: {preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("DomainError: {0}")]
    DomainError(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] EmgIoError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Global,
    InterSession,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Global => "global",
            Setting::InterSession => "intersession",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub id: usize,
    pub train: Vec<BatchKey>,
    pub test: Vec<BatchKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub window_ms: u32,
    pub seed: u64,
    pub model: SpeechNetConfig,
    /// Full training of a fold model.
    pub train: TrainConfig,
    /// Per-batch adaptation in the incremental scenarios. Keys given in a
    /// config file override [`TrainConfig::fine_tune`], not the training defaults.
    #[serde(deserialize_with = "fine_tune_overrides")]
    pub fine_tune: TrainConfig,
    /// Share of the training pool carved out (stratified) for validation.
    pub val_fraction: f64,
    /// Folds trained concurrently; 1 runs sequentially.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_ms: 800,
            seed: 0,
            model: SpeechNetConfig::default(),
            train: TrainConfig::default(),
            fine_tune: TrainConfig::fine_tune(),
            val_fraction: 1.0 - training::CARVE_OUT_TRAIN_FRACTION,
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(EvalError::InvalidConfig(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.jobs == 0 {
            return Err(EvalError::InvalidConfig("jobs must be at least 1".into()));
        }
        self.train.validate()?;
        self.fine_tune.validate()?;
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn fine_tune_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(TrainConfig::fine_tune()).map_err(D::Error::custom)?;
    merge_json(&mut base, patch);
    serde_json::from_value(base).map_err(D::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train: Vec<BatchKey>,
    pub test: Vec<BatchKey>,
    pub balanced_accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub subject: u32,
    pub condition: Condition,
    pub window_ms: u32,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
    pub warnings: Vec<String>,
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Batch evaluated zero-shot.
    pub batch: u32,
    pub accuracy: f64,
    /// Accuracy of the non-adapted model on the same batch, if there is one.
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalCurve {
    pub scenario: String,
    pub session: u32,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub window_ms: u32,
    pub mean_accuracy: f64,
    pub mean_itr: f64,
    pub fold_accuracy: Vec<f64>,
    pub fold_itr: Vec<f64>,
}

// ---------------------------------------------------------------- metrics

/// Unweighted mean of per-class recall over `n_classes` classes, all of which
/// must occur in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let cm = confusion_matrix(preds, labels, n_classes)?;
    let mut sum = 0.0;
    for (class, row) in cm.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(EvalError::MissingClass(class));
        }
        sum += row[class] as f64 / total as f64;
    }
    Ok(sum / n_classes as f64)
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let mut cm = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(EvalError::DomainError(format!("class index {} outside 0..{n_classes}", p.max(t))));
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Information transfer rate in bit/min for `c` classes, `t_s` seconds per
/// selection and accuracy `p`:
///
/// `(60 / T) [log2 C + P log2 P + (1 - P) log2((1 - P) / (C - 1))]`
pub fn itr(c: usize, t_s: f64, p: f64) -> Result<f64, EvalError> {
    if c < 2 {
        return Err(EvalError::DomainError(format!("{c} classes")));
    }
    if !(t_s > 0.0 && t_s.is_finite()) {
        return Err(EvalError::DomainError(format!("selection time {t_s} s")));
    }
    let chance = 1.0 / c as f64;
    if !(p >= chance - 1e-12 && p <= 1.0) {
        return Err(EvalError::DomainError(format!("accuracy {p} outside [1/{c}, 1]")));
    }
    if p <= chance + 1e-12 {
        return Ok(0.0);
    }
    let cf = c as f64;
    let mut bits = cf.log2() + p * p.log2();
    if p < 1.0 {
        bits += (1.0 - p) * ((1.0 - p) / (cf - 1.0)).log2();
    }
    Ok(60.0 / t_s * bits)
}

// ---------------------------------------------------------------- folds

fn session_batches(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
) -> Result<(Vec<u32>, Vec<u32>), EvalError> {
    let m = source.manifest();
    let sessions = m.sessions(subject);
    let mut all: Vec<u32> = sessions.iter().flat_map(|&s| m.batches(subject, s, condition)).collect();
    all.sort_unstable();
    all.dedup();
    if sessions.is_empty() || all.is_empty() {
        return Err(EvalError::NoData(format!("subject {subject} has no {condition} batches")));
    }
    for &session in &sessions {
        let have = m.batches(subject, session, condition);
        if let Some(&batch) = all.iter().find(|b| !have.contains(b)) {
            return Err(EvalError::IncompleteManifest(BatchKey { subject, session, batch, condition }));
        }
    }
    Ok((sessions, all))
}

fn key(subject: u32, session: u32, batch: u32, condition: Condition) -> BatchKey {
    BatchKey { subject, session, batch, condition }
}

/// Leave-one-batch-out: fold `i` tests on the `i`-th batch of every session.
pub fn make_folds_global(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
) -> Result<Vec<Fold>, EvalError> {
    let (sessions, batches) = session_batches(source, subject, condition)?;
    Ok(batches
        .iter()
        .enumerate()
        .map(|(i, &held)| {
            let mut fold = Fold { id: i + 1, train: Vec::new(), test: Vec::new() };
            for &s in &sessions {
                for &b in &batches {
                    let k = key(subject, s, b, condition);
                    if b == held {
                        fold.test.push(k)
                    } else {
                        fold.train.push(k)
                    }
                }
            }
            fold
        })
        .collect())
}

/// Leave-one-session-out: fold `s` tests on every batch of session `s`.
pub fn make_folds_intersession(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
) -> Result<Vec<Fold>, EvalError> {
    let (sessions, batches) = session_batches(source, subject, condition)?;
    if sessions.len() < 2 {
        return Err(EvalError::NoData(format!("subject {subject} has a single session")));
    }
    Ok(sessions
        .iter()
        .enumerate()
        .map(|(i, &held)| {
            let mut fold = Fold { id: i + 1, train: Vec::new(), test: Vec::new() };
            for &s in &sessions {
                for &b in &batches {
                    let k = key(subject, s, b, condition);
                    if s == held {
                        fold.test.push(k)
                    } else {
                        fold.train.push(k)
                    }
                }
            }
            fold
        })
        .collect())
}

pub fn make_folds(
    setting: Setting,
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
) -> Result<Vec<Fold>, EvalError> {
    match setting {
        Setting::Global => make_folds_global(source, subject, condition),
        Setting::InterSession => make_folds_intersession(source, subject, condition),
    }
}

// ---------------------------------------------------------------- data

/// Filtered, segmented and rest-balanced batches of one subject and condition.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject: u32,
    pub condition: Condition,
    pub fs_hz: u32,
    pub batches: BTreeMap<BatchKey, Vec<Segment>>,
}

/// Normalized windows per batch for one window length.
pub type WindowSet = BTreeMap<BatchKey, Vec<LabeledWindow>>;

impl SubjectData {
    /// Loads every batch of `subject` under `condition`. Rest segments are
    /// downsampled per batch to the per-command count.
    pub fn load(
        source: &dyn RecordingSource,
        subject: u32,
        condition: Condition,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let (sessions, batches) = session_batches(source, subject, condition)?;
        let keys: Vec<BatchKey> =
            sessions.iter().flat_map(|&s| batches.iter().map(move |&b| key(subject, s, b, condition))).collect();
        Self::load_keys(source, subject, condition, &keys, seed)
    }

    /// Loads the given batches only.
    pub fn load_keys(
        source: &dyn RecordingSource,
        subject: u32,
        condition: Condition,
        keys: &[BatchKey],
        seed: u64,
    ) -> Result<Self, EvalError> {
        let mut out = BTreeMap::new();
        let mut fs_hz = source.manifest().fs_hz;
        for &k in keys {
            let rec = dsp::preprocess_recording(&source.recording(&k)?)?;
            fs_hz = rec.fs_hz;
            let segs: Vec<Segment> = segment(&rec).into_iter().filter(|s| s.event.condition == condition).collect();
            let segs = balance_rest(segs, seed::derive(seed, &format!("balance/{k}")))?;
            out.insert(k, segs);
        }
        Ok(Self { subject, condition, fs_hz, batches: out })
    }

    pub fn windows(&self, key: &BatchKey, window_ms: u32) -> Result<Vec<LabeledWindow>, EvalError> {
        let segs = self.batches.get(key).ok_or(EvalError::IncompleteManifest(*key))?;
        segs.iter()
            .map(|s| {
                let mut w = extract_window(s, window_ms, self.fs_hz, *key)?;
                crate::speechnet::normalize_window(&mut w.data, w.n_channels);
                Ok(w)
            })
            .collect()
    }

    pub fn window_set(&self, window_ms: u32) -> Result<WindowSet, EvalError> {
        self.batches.keys().map(|k| Ok((*k, self.windows(k, window_ms)?))).collect()
    }
}

fn gather<'a>(set: &'a WindowSet, keys: &[BatchKey]) -> Result<Vec<&'a LabeledWindow>, EvalError> {
    let mut out = Vec::new();
    for k in keys {
        out.extend(set.get(k).ok_or(EvalError::IncompleteManifest(*k))?.iter());
    }
    Ok(out)
}

fn labels(set: &[&LabeledWindow]) -> Vec<usize> {
    set.iter().map(|w| w.label.id()).collect()
}

/// Balanced accuracy and confusion of `model` on a window set.
pub fn score(model: &SpeechNet, set: &[&LabeledWindow]) -> Result<(f64, Vec<Vec<usize>>), EvalError> {
    let (_, preds) = training::evaluate(model, set)?;
    let truth = labels(set);
    let k = model.n_classes();
    Ok((balanced_accuracy(&preds, &truth, k)?, confusion_matrix(&preds, &truth, k)?))
}

/// Trains a fresh model on a fold's training batches and scores it on the test batches.
pub fn train_fold(
    windows: &WindowSet,
    fold: &Fold,
    cfg: &EvalConfig,
    label: &str,
) -> Result<(SpeechNet, FoldResult, TrainHistory), EvalError> {
    let pool = gather(windows, &fold.train)?;
    let fold_seed = seed::derive(cfg.seed, &format!("{label}/fold{}", fold.id));
    let (tr, va) = training::stratified_split(&pool, 1.0 - cfg.val_fraction, seed::derive(fold_seed, "carve"));
    let train_set: Vec<&LabeledWindow> = tr.iter().map(|&i| pool[i]).collect();
    let val_set: Vec<&LabeledWindow> = va.iter().map(|&i| pool[i]).collect();
    let mut model = SpeechNet::build(cfg.model, seed::derive(fold_seed, "init"))?;
    let tcfg = TrainConfig { seed: seed::derive(fold_seed, "train"), ..cfg.train };
    let history = training::train(&mut model, &train_set, &val_set, &tcfg)?;
    let test = gather(windows, &fold.test)?;
    let (acc, confusion) = score(&model, &test)?;
    let result = FoldResult {
        fold: fold.id,
        train: fold.train.clone(),
        test: fold.test.clone(),
        balanced_accuracy: acc,
        confusion,
        epochs: history.epochs.len(),
        best_epoch: history.best_epoch,
    };
    Ok((model, result, history))
}

fn run_parallel<T: Send, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>, EvalError>
where
    F: Fn(usize) -> Result<T, EvalError> + Sync + Send,
{
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Runs every fold of a setting on prepared windows; returns the report and
/// the trained fold models in fold order.
pub fn run_setting_on(
    setting: Setting,
    source: &dyn RecordingSource,
    windows: &WindowSet,
    subject: u32,
    condition: Condition,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<SpeechNet>), EvalError> {
    cfg.validate()?;
    let folds = make_folds(setting, source, subject, condition)?;
    let mut warnings = Vec::new();
    if setting == Setting::InterSession && folds.len() < 3 {
        warnings.push(format!("only {} sessions; each fold trains on a single session", folds.len()));
    }
    let label = format!("{}/subject{subject}/{condition}/{}ms", setting.name(), cfg.window_ms);
    let results = run_parallel(cfg.jobs, folds.len(), |i| train_fold(windows, &folds[i], cfg, &label))?;
    let mut models = Vec::with_capacity(results.len());
    let mut fold_results = Vec::with_capacity(results.len());
    for (m, r, _) in results {
        models.push(m);
        fold_results.push(r);
    }
    let accs: Vec<f64> = fold_results.iter().map(|r| r.balanced_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = EvalReport {
        setting: setting.name().into(),
        subject,
        condition,
        window_ms: cfg.window_ms,
        folds: fold_results,
        mean,
        std,
        warnings,
        config: cfg.clone(),
    };
    Ok((report, models))
}

/// Loads, preprocesses and evaluates one subject under one setting.
pub fn run_setting(
    setting: Setting,
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let data = SubjectData::load(source, subject, condition, cfg.seed)?;
    let windows = data.window_set(cfg.window_ms)?;
    Ok(run_setting_on(setting, source, &windows, subject, condition, cfg)?.0)
}

// ---------------------------------------------------------------- incremental

fn session_keys(windows: &WindowSet, session: u32) -> Vec<BatchKey> {
    windows.keys().filter(|k| k.session == session).copied().collect()
}

/// Scenario a on one held-out session, starting from a model pretrained on
/// the other sessions: zero-shot on the first batch, then fine-tune on batch
/// `k` and test zero-shot on batch `k + 1`.
pub fn incremental_a_from(
    pretrained: &SpeechNet,
    windows: &WindowSet,
    session: u32,
    cfg: &EvalConfig,
) -> Result<IncrementalCurve, EvalError> {
    let keys = session_keys(windows, session);
    let first = keys.first().ok_or_else(|| EvalError::NoData(format!("session {session} has no batches")))?;
    let mut model = pretrained.clone();
    let batch0 = gather(windows, &[*first])?;
    let base0 = score(pretrained, &batch0)?.0;
    let mut points = vec![CurvePoint { batch: first.batch, accuracy: base0, baseline: Some(base0) }];
    for pair in keys.windows(2) {
        let adapt = gather(windows, &[pair[0]])?;
        let ft = TrainConfig {
            seed: seed::derive(cfg.seed, &format!("incr-a/{}/session{session}/batch{}", first.subject, pair[0].batch)),
            ..cfg.fine_tune
        };
        training::fine_tune(&mut model, &adapt, &ft)?;
        let test = gather(windows, &[pair[1]])?;
        points.push(CurvePoint {
            batch: pair[1].batch,
            accuracy: score(&model, &test)?.0,
            baseline: Some(score(pretrained, &test)?.0),
        });
    }
    Ok(IncrementalCurve { scenario: "incr-a".into(), session, points })
}

/// Scenario a for one held-out session: pretrains on the remaining sessions
/// (as the matching inter-session fold), then adapts batch by batch.
pub fn run_incremental_a(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
    held_out_session: u32,
    cfg: &EvalConfig,
) -> Result<IncrementalCurve, EvalError> {
    cfg.validate()?;
    let folds = make_folds_intersession(source, subject, condition)?;
    let fold = folds
        .iter()
        .find(|f| f.test.iter().all(|k| k.session == held_out_session))
        .ok_or_else(|| EvalError::NoData(format!("session {held_out_session} not in the manifest")))?;
    let data = SubjectData::load(source, subject, condition, cfg.seed)?;
    let windows = data.window_set(cfg.window_ms)?;
    let label = format!("{}/subject{subject}/{condition}/{}ms", Setting::InterSession.name(), cfg.window_ms);
    let (model, _, _) = train_fold(&windows, fold, cfg, &label)?;
    incremental_a_from(&model, &windows, held_out_session, cfg)
}

/// Scenario b on one session: a randomly initialized model trained on batch
/// `k` (70/30 split) and tested zero-shot on batch `k + 1`. The same model
/// keeps learning from one round to the next.
pub fn incremental_b_on(windows: &WindowSet, session: u32, cfg: &EvalConfig) -> Result<IncrementalCurve, EvalError> {
    let keys = session_keys(windows, session);
    let subject = keys.first().map_or(0, |k| k.subject);
    let base = seed::derive(cfg.seed, &format!("incr-b/{subject}/session{session}"));
    let mut model = SpeechNet::build(cfg.model, seed::derive(base, "init"))?;
    let mut points = Vec::new();
    for pair in keys.windows(2) {
        let batch = gather(windows, &[pair[0]])?;
        let tcfg = TrainConfig {
            seed: seed::derive(base, &format!("batch{}", pair[0].batch)),
            bn: BnPolicy::Update,
            ..cfg.fine_tune
        };
        training::fine_tune(&mut model, &batch, &tcfg)?;
        let test = gather(windows, &[pair[1]])?;
        points.push(CurvePoint { batch: pair[1].batch, accuracy: score(&model, &test)?.0, baseline: None });
    }
    Ok(IncrementalCurve { scenario: "incr-b".into(), session, points })
}

pub fn run_incremental_b(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
    session: u32,
    cfg: &EvalConfig,
) -> Result<IncrementalCurve, EvalError> {
    cfg.validate()?;
    let data = SubjectData::load(source, subject, condition, cfg.seed)?;
    let windows = data.window_set(cfg.window_ms)?;
    incremental_b_on(&windows, session, cfg)
}

// ---------------------------------------------------------------- ablation

/// ITR of one fold; a fold at or below chance transfers no information.
pub fn fold_itr(n_classes: usize, window_ms: u32, accuracy: f64) -> Result<f64, EvalError> {
    let chance = 1.0 / n_classes as f64;
    itr(n_classes, f64::from(window_ms) / 1000.0, accuracy.max(chance))
}

/// Inter-session accuracy and ITR for each window size; ITR is computed per
/// fold and then averaged.
pub fn window_ablation(
    source: &dyn RecordingSource,
    subject: u32,
    condition: Condition,
    sizes_ms: &[u32],
    cfg: &EvalConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    cfg.validate()?;
    let data = SubjectData::load(source, subject, condition, cfg.seed)?;
    let mut rows = Vec::with_capacity(sizes_ms.len());
    for &window_ms in sizes_ms {
        let windows = data.window_set(window_ms)?;
        let c = EvalConfig { window_ms, ..cfg.clone() };
        let (report, _) = run_setting_on(Setting::InterSession, source, &windows, subject, condition, &c)?;
        let fold_accuracy: Vec<f64> = report.folds.iter().map(|f| f.balanced_accuracy).collect();
        let fold_itr = fold_accuracy
            .iter()
            .map(|&a| fold_itr(cfg.model.n_classes, window_ms, a))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(AblationRow {
            window_ms,
            mean_accuracy: mean_std(&fold_accuracy).0,
            mean_itr: mean_std(&fold_itr).0,
            fold_accuracy,
            fold_itr,
        });
    }
    Ok(rows)
}

/// Plain-text table of an ablation, one row per window size.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("window_ms  accuracy  itr_bits_per_min\n");
    for r in rows {
        s.push_str(&format!("{:>9}  {:>8.4}  {:>16.2}\n", r.window_ms, r.mean_accuracy, r.mean_itr));
    }
    s
}

/// Labels as class names, for reports.
pub fn class_names() -> Vec<&'static str> {
    CommandLabel::ALL.iter().map(|c| c.name()).collect()
}
