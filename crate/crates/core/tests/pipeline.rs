mod common;

use emgspeech::emgio::{BatchKey, ManifestSource, RecordingSource, SynthDataset, SynthSpec};
use emgspeech::evalharness::SubjectData;
use emgspeech::nnkernels::{softmax_cross_entropy, BnMode, Tensor4};
use emgspeech::quantize::calibrate_and_quantize;
use emgspeech::speechnet::{normalize_window, SpeechNetConfig};
use emgspeech::streamrt::{stream_classify, StreamConfig};
use emgspeech::training::{train, TrainConfig};
use emgspeech::{Condition, LabeledWindow, SpeechNet};

use common::random_vec;

fn key(session: u32, batch: u32) -> BatchKey {
    BatchKey { subject: 1, session, batch, condition: Condition::Vocalized }
}

/// Mean cross-entropy of a batch and its gradient w.r.t. the logits.
fn batch_loss(logits: &[f32], labels: &[usize]) -> (f64, Vec<f32>) {
    let k = logits.len() / labels.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, &y) in logits.chunks(k).zip(labels) {
        let (l, g) = softmax_cross_entropy(z, y).unwrap();
        loss += f64::from(l);
        grad.extend(g.iter().map(|v| v / labels.len() as f32));
    }
    (loss / labels.len() as f64, grad)
}

/// Perturbs the parameters by `eps * dir` (per tensor) and returns the
/// central-difference slope of the batch loss.
fn slope(model: &SpeechNet, x: &Tensor4<f32>, labels: &[usize], dir: &[Vec<f32>], eps: f32) -> f64 {
    let loss_at = |sign: f32| {
        let mut m = model.clone();
        for (p, d) in m.params_mut().into_iter().zip(dir) {
            for (v, dv) in p.iter_mut().zip(d) {
                *v += sign * eps * dv;
            }
        }
        let (z, _) = m.forward_train(x, BnMode::Train).unwrap();
        batch_loss(&z, labels).0
    };
    (loss_at(1.0) - loss_at(-1.0)) / (2.0 * f64::from(eps))
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x * y)).sum()
}

// Conv weights feed max pooling and ReLU, whose switching points make finite
// differences converge only linearly in the step. They are covered by the
// along-gradient check; biases, BN affine and the dense head get a per-tensor check.
const N_BLOCKS: usize = 5;

fn directional_check(batch_norm: bool) {
    let cfg = SpeechNetConfig { batch_norm, ..Default::default() };
    let mut model = SpeechNet::build(cfg, 5).unwrap();
    let t = 256;
    let windows: Vec<Vec<f32>> = (0..4)
        .map(|i| {
            let mut w: Vec<f32> = random_vec(100 + i, 14 * t).iter().map(|&v| v as f32).collect();
            normalize_window(&mut w, 14);
            w
        })
        .collect();
    let labels = [0, 3, 8, 5];
    let x = model.batch_tensor(windows.iter().map(|w| &w[..]), t).unwrap();
    let (logits, record) = model.forward_train(&x, BnMode::Train).unwrap();
    let (_, dlogits) = batch_loss(&logits, &labels);
    let grads = model.backward(&record, &dlogits).unwrap();

    let g2: f64 = grads.iter().map(|g| dot32(g, g)).sum();
    let numeric = slope(&model, &x, &labels, &grads, 3e-4);
    let rel = (numeric - g2).abs() / g2;
    assert!(rel < 2e-2, "bn={batch_norm}: |g|^2 {g2} vs slope {numeric} (rel {rel})");

    let per_block = if batch_norm { 4 } else { 2 };
    for i in 0..model.param_lens().len() {
        if i < N_BLOCKS * per_block && i % per_block == 0 {
            continue;
        }
        let dir: Vec<Vec<f32>> =
            model
                .param_lens()
                .iter()
                .enumerate()
                .map(|(j, &m)| {
                    if j == i {
                        random_vec(900 + j as u64, m).iter().map(|&v| v as f32).collect()
                    } else {
                        vec![0.0; m]
                    }
                })
                .collect();
        let analytic = dot32(&grads[i], &dir[i]);
        let numeric = slope(&model, &x, &labels, &dir, 1e-3);
        let tol = 2e-2 * analytic.abs().max(numeric.abs()) + 1e-3;
        assert!((analytic - numeric).abs() <= tol, "bn={batch_norm} tensor {i}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn model_gradient_matches_directional_difference() {
    directional_check(true);
    directional_check(false);
}

#[test]
fn written_dataset_reads_back_identically() {
    let spec = SynthSpec { n_subjects: 1, n_sessions: 2, n_batches: 2, reps_per_command: 20, ..Default::default() };
    let ds = SynthDataset::new(spec, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let src = ManifestSource::open(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(src.manifest(), ds.manifest());
    for (k, _) in ds.manifest().keys() {
        assert_eq!(src.recording(&k).unwrap(), ds.recording(&k).unwrap(), "{k}");
    }
    let a = SubjectData::load(&ds, 1, Condition::Silent, 1).unwrap().window_set(800).unwrap();
    let b = SubjectData::load(&src, 1, Condition::Silent, 1).unwrap().window_set(800).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.values().all(|v| v.len() == 180));
}

/// Train briefly on four batches, then stream the fifth: the prediction whose
/// window starts at an event onset should match the event label.
#[test]
fn streaming_tracks_utterances() {
    let spec = SynthSpec { n_subjects: 1, n_sessions: 1, conditions: vec![Condition::Vocalized], ..Default::default() };
    let ds = SynthDataset::new(spec, 9).unwrap();
    let train_keys: Vec<BatchKey> = (1..=4).map(|b| key(1, b)).collect();
    let data = SubjectData::load_keys(&ds, 1, Condition::Vocalized, &train_keys, 9).unwrap();
    let windows = data.window_set(800).unwrap();
    let all: Vec<&LabeledWindow> = windows.values().flatten().collect();
    let (tr, va): (Vec<_>, Vec<_>) = all.iter().enumerate().partition(|(i, _)| i % 7 != 0);
    let tr: Vec<&LabeledWindow> = tr.into_iter().map(|(_, w)| *w).collect();
    let va: Vec<&LabeledWindow> = va.into_iter().map(|(_, w)| *w).collect();
    let mut model = SpeechNet::canonical(9);
    train(&mut model, &tr, &va, &TrainConfig { max_epochs: 8, seed: 9, ..Default::default() }).unwrap();

    let calib: Vec<&[f32]> = all.iter().step_by(4).map(|w| &w.data[..]).collect();
    let q = calibrate_and_quantize(&model, &calib, 400).unwrap();
    let rec = ds.recording(&key(1, 5)).unwrap();
    let cfg = StreamConfig::default();
    let out = stream_classify(&cfg, &q, &rec).unwrap();
    let (w, s) = (cfg.window_len(), cfg.step_len());
    assert_eq!(out.predictions.len(), (rec.n_samples - w) / s + 1);

    let (mut hits, mut total) = (0, 0);
    for ev in &rec.events {
        let start = ev.onset_sample.div_ceil(s) * s;
        if start + w > rec.n_samples {
            continue;
        }
        let p = out.predictions.iter().find(|p| p.end_sample == start + w).expect("grid point");
        total += 1;
        hits += usize::from(p.label == ev.label);
    }
    let acc = hits as f64 / total as f64;
    assert!(total > 100, "{total} aligned events");
    assert!(acc >= 0.9, "utterance-aligned streaming accuracy {acc:.3}");
}
