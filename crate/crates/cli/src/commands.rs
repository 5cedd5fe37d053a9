//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use emgspeech::dsp::preprocess_recording;
use emgspeech::emgio::{
    read_events, read_recording, synth_dataset, write_recording, BatchKey, ManifestSource, RecordingSource,
};
use emgspeech::evalharness::{
    ablation_table, mean_std, run_incremental_a, run_incremental_b, run_setting, window_ablation, EvalReport,
    IncrementalCurve, Setting, SubjectData, ABLATION_WINDOWS_MS,
};
use emgspeech::quantize::{calibrate_and_quantize, count_macs, QuantizedSpeechNet};
use emgspeech::seed::derive;
use emgspeech::streamrt::stream_classify;
use emgspeech::training::{fine_tune, stratified_split, train, TrainConfig};
use emgspeech::{Condition, EmgRecording, Event, LabeledWindow, SpeechNet};
use serde::Serialize;

use crate::config::{read_json, write_echo, write_json, RunConfig};
use crate::error::CliError;
use crate::{Cli, CliResult, Command, DataArgs, SettingArg};

struct Ctx {
    cfg: RunConfig,
    out: std::path::PathBuf,
}

impl Ctx {
    fn sub_seed(&self, label: &str) -> u64 {
        derive(self.cfg.seed, label)
    }

    fn echo(&self, command: &str) -> CliResult {
        write_echo(&self.out, command, &self.cfg)
    }
}

pub fn dispatch(cli: Cli) -> CliResult {
    let (cfg, out) = RunConfig::resolve(&cli.global)?;
    let mut ctx = Ctx { cfg, out };
    match cli.command {
        Command::Synth { subjects, sessions, batches, reps, shift } => {
            let spec = &mut ctx.cfg.synth;
            spec.n_subjects = subjects.unwrap_or(spec.n_subjects);
            spec.n_sessions = sessions.unwrap_or(spec.n_sessions);
            spec.n_batches = batches.unwrap_or(spec.n_batches);
            spec.reps_per_command = reps.unwrap_or(spec.reps_per_command);
            spec.session_shift_strength = shift.unwrap_or(spec.session_shift_strength);
            synth(&ctx)
        }
        Command::Import { csv, events, fs, output } => import(&csv, events.as_deref(), fs, &output),
        Command::Preprocess { input, output } => {
            let rec = preprocess_recording(&read_recording(&input)?)?;
            write_recording(&output, &rec)?;
            eprintln!("wrote {}", output.display());
            Ok(())
        }
        Command::Train { data, sessions } => train_cmd(&mut ctx, &data, &sessions),
        Command::Finetune { data, model, session, batch } => finetune_cmd(&mut ctx, &data, &model, session, batch),
        Command::Quantize { data, model } => quantize_cmd(&mut ctx, &data, &model),
        Command::Eval { data, setting, session, jobs } => {
            if let Some(j) = jobs {
                ctx.cfg.eval.jobs = j;
            }
            eval_cmd(&mut ctx, &data, setting, session)
        }
        Command::ItrAblation { data, sizes, jobs } => {
            if let Some(j) = jobs {
                ctx.cfg.eval.jobs = j;
            }
            ablation_cmd(&mut ctx, &data, &sizes)
        }
        Command::Stream { model, input, window_ms, step_ms } => {
            let s = &mut ctx.cfg.stream;
            s.window_ms = window_ms.unwrap_or(s.window_ms);
            s.step_ms = step_ms.unwrap_or(s.step_ms);
            stream_cmd(&ctx, &model, &input)
        }
        Command::Report { reports } => report_cmd(&ctx, &reports),
    }
}

fn synth(ctx: &Ctx) -> CliResult {
    let manifest = synth_dataset(ctx.cfg.synth.clone(), ctx.sub_seed("synth"), &ctx.out)?;
    ctx.echo("synth")?;
    let n = manifest.keys().count();
    eprintln!("wrote {n} recordings and manifest.json to {}", ctx.out.display());
    Ok(())
}

/// Best-effort CSV reader: one row per sample, one numeric column per channel.
/// A non-numeric first row is taken as a header. The delimiter is guessed
/// from the first line (`,`, `;` or tab).
fn import(csv_path: &Path, events: Option<&Path>, fs_hz: u32, output: &Path) -> CliResult {
    let text = fs::read_to_string(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let delimiter = b",;\t".iter().copied().max_by_key(|d| first.bytes().filter(|b| b == d).count()).unwrap_or(b',');
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let data_err = |line: u64, msg: String| CliError::Data(format!("{}:{line}: {msg}", csv_path.display()));
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(i as u64 + 1, e.to_string()))?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        let fields: Result<Vec<f32>, _> = record.iter().map(str::parse::<f32>).collect();
        match fields {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(data_err(line, e.to_string())),
        }
    }
    let n_ch = rows.first().map_or(0, Vec::len);
    if n_ch == 0 {
        return Err(CliError::Data(format!("{}: no numeric rows", csv_path.display())));
    }
    let n_ch16 = u16::try_from(n_ch).map_err(|_| CliError::Data(format!("{n_ch} columns is too many channels")))?;
    let samples = (0..n_ch).flat_map(|k| rows.iter().map(move |r| r[k])).collect();
    let evs: Vec<Event> = match events {
        Some(p) => read_events(p)?,
        None => Vec::new(),
    };
    let rec = EmgRecording::new(fs_hz, n_ch16, 0.0, samples, evs)?;
    write_recording(output, &rec)?;
    eprintln!("wrote {} ({} channels, {} samples, {} events)", output.display(), n_ch, rec.n_samples, rec.events.len());
    Ok(())
}

fn subject_of(data: &DataArgs) -> CliResult<u32> {
    data.subject.ok_or_else(|| CliError::Usage("--subject is required for this command".into()))
}

fn subjects_of(data: &DataArgs, src: &ManifestSource) -> Vec<u32> {
    match data.subject {
        Some(s) => vec![s],
        None => src.manifest().subjects.iter().map(|s| s.id).collect(),
    }
}

fn apply_data_args(ctx: &mut Ctx, data: &DataArgs) -> CliResult<(ManifestSource, Condition)> {
    if let Some(ms) = data.window_ms {
        ctx.cfg.eval.window_ms = ms;
    }
    ctx.cfg.eval.seed = ctx.sub_seed("eval");
    ctx.cfg.eval.validate()?;
    Ok((ManifestSource::open(&data.manifest)?, data.condition.into()))
}

fn train_cmd(ctx: &mut Ctx, data: &DataArgs, sessions: &[u32]) -> CliResult {
    let (src, cond) = apply_data_args(ctx, data)?;
    let subject = subject_of(data)?;
    let sd = SubjectData::load(&src, subject, cond, ctx.sub_seed("data"))?;
    let windows = sd.window_set(ctx.cfg.eval.window_ms)?;
    let pool: Vec<&LabeledWindow> = windows
        .iter()
        .filter(|(k, _)| sessions.is_empty() || sessions.contains(&k.session))
        .flat_map(|(_, v)| v.iter())
        .collect();
    if pool.is_empty() {
        return Err(CliError::Data(format!("no windows for subject {subject} in sessions {sessions:?}")));
    }
    let (tr, va) = stratified_split(&pool, 1.0 - ctx.cfg.eval.val_fraction, ctx.sub_seed("train/carve"));
    let train_set: Vec<&LabeledWindow> = tr.iter().map(|&i| pool[i]).collect();
    let val_set: Vec<&LabeledWindow> = va.iter().map(|&i| pool[i]).collect();
    let mut model = SpeechNet::build(ctx.cfg.eval.model, ctx.sub_seed("train/init"))?;
    let tcfg = TrainConfig { seed: ctx.sub_seed("train/shuffle"), ..ctx.cfg.eval.train };
    let history = train(&mut model, &train_set, &val_set, &tcfg)?;
    ctx.echo("train")?;
    model.save(&ctx.out.join("model.swnm"))?;
    write_json(&ctx.out.join("history.json"), &history)?;
    if let Some(best) = history.best() {
        eprintln!(
            "trained {} epochs on {} windows; best epoch {} val loss {:.4} val balanced accuracy {:.4}",
            history.epochs.len(),
            train_set.len(),
            best.epoch,
            best.val_loss,
            best.val_balanced_accuracy
        );
    }
    Ok(())
}

fn finetune_cmd(ctx: &mut Ctx, data: &DataArgs, model_path: &Path, session: u32, batch: u32) -> CliResult {
    let (src, cond) = apply_data_args(ctx, data)?;
    let subject = subject_of(data)?;
    let key = BatchKey { subject, session, batch, condition: cond };
    let sd = SubjectData::load_keys(&src, subject, cond, &[key], ctx.sub_seed("data"))?;
    let windows = sd.windows(&key, ctx.cfg.eval.window_ms)?;
    let refs: Vec<&LabeledWindow> = windows.iter().collect();
    let mut model = SpeechNet::load(model_path)?;
    let tcfg = TrainConfig { seed: ctx.sub_seed(&format!("finetune/{key}")), ..ctx.cfg.eval.fine_tune };
    let history = fine_tune(&mut model, &refs, &tcfg)?;
    ctx.echo("finetune")?;
    model.save(&ctx.out.join("model_finetuned.swnm"))?;
    write_json(&ctx.out.join("finetune_history.json"), &history)?;
    eprintln!("fine-tuned on {} windows of ({key}) for {} epochs", refs.len(), history.epochs.len());
    Ok(())
}

#[derive(Serialize)]
struct QuantReport {
    window_ms: u32,
    calibration_windows: usize,
    footprint: emgspeech::quantize::FootprintReport,
    macs: emgspeech::quantize::MacReport,
}

fn quantize_cmd(ctx: &mut Ctx, data: &DataArgs, model_path: &Path) -> CliResult {
    let (src, cond) = apply_data_args(ctx, data)?;
    let subject = subject_of(data)?;
    let model = SpeechNet::load(model_path)?;
    let sd = SubjectData::load(&src, subject, cond, ctx.sub_seed("data"))?;
    let windows = sd.window_set(ctx.cfg.eval.window_ms)?;
    let all: Vec<&[f32]> = windows.values().flat_map(|v| v.iter().map(|w| &w.data[..])).collect();
    // Evenly spaced over every batch.
    let n = ctx.cfg.calibration_windows.min(all.len());
    let calib: Vec<&[f32]> = (0..n).map(|i| all[i * all.len() / n]).collect();
    let t = emgspeech::emgio::window_samples(ctx.cfg.eval.window_ms, sd.fs_hz);
    let q = calibrate_and_quantize(&model, &calib, t)?;
    let report = QuantReport {
        window_ms: ctx.cfg.eval.window_ms,
        calibration_windows: calib.len(),
        footprint: q.footprint(),
        macs: count_macs(&q.arch, t)?,
    };
    ctx.echo("quantize")?;
    q.save(&ctx.out.join("model.swq1"))?;
    write_json(&ctx.out.join("quant_report.json"), &report)?;
    println!("footprint  {:>8} bytes", report.footprint.total_bytes);
    for l in &report.macs.layers {
        println!("{:<10} {:>8} MACs", l.layer, l.macs);
    }
    println!("total      {:>8} MACs", report.macs.total);
    Ok(())
}

fn sessions_for(src: &ManifestSource, subject: u32, only: Option<u32>) -> Vec<u32> {
    match only {
        Some(s) => vec![s],
        None => src.manifest().sessions(subject),
    }
}

fn eval_cmd(ctx: &mut Ctx, data: &DataArgs, setting: SettingArg, session: Option<u32>) -> CliResult {
    let (src, cond) = apply_data_args(ctx, data)?;
    let cfg = ctx.cfg.eval.clone();
    ctx.echo("eval")?;
    for subject in subjects_of(data, &src) {
        match setting {
            SettingArg::Global | SettingArg::Intersession => {
                let s = if setting == SettingArg::Global { Setting::Global } else { Setting::InterSession };
                let report = run_setting(s, &src, subject, cond, &cfg)?;
                let path = ctx.out.join(format!("eval_{}_s{subject}_{cond}.json", s.name()));
                write_json(&path, &report)?;
                print_report(&report);
            }
            SettingArg::IncrA | SettingArg::IncrB => {
                let name = if setting == SettingArg::IncrA { "incr-a" } else { "incr-b" };
                let mut curves = Vec::new();
                for sess in sessions_for(&src, subject, session) {
                    let curve = if setting == SettingArg::IncrA {
                        run_incremental_a(&src, subject, cond, sess, &cfg)?
                    } else {
                        run_incremental_b(&src, subject, cond, sess, &cfg)?
                    };
                    print_curve(subject, &curve);
                    curves.push(curve);
                }
                write_json(&ctx.out.join(format!("eval_{name}_s{subject}_{cond}.json")), &curves)?;
            }
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{} subject {} {} ({} ms)", r.setting, r.subject, r.condition, r.window_ms);
    println!("fold  test batches                     balanced_acc");
    for f in &r.folds {
        let test: Vec<String> = f.test.iter().map(|k| format!("s{}b{}", k.session, k.batch)).collect();
        println!("{:>4}  {:<32} {:>12.4}", f.fold, test.join(","), f.balanced_accuracy);
    }
    println!("mean  {:<32} {:>12.4} +- {:.4}", "", r.mean, r.std);
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn print_curve(subject: u32, c: &IncrementalCurve) {
    println!("{} subject {subject} session {}", c.scenario, c.session);
    println!("batch  accuracy  baseline");
    for p in &c.points {
        let base = p.baseline.map_or("-".to_string(), |b| format!("{b:.4}"));
        println!("{:>5}  {:>8.4}  {:>8}", p.batch, p.accuracy, base);
    }
}

fn ablation_cmd(ctx: &mut Ctx, data: &DataArgs, sizes: &[u32]) -> CliResult {
    let (src, cond) = apply_data_args(ctx, data)?;
    let sizes = if sizes.is_empty() { ABLATION_WINDOWS_MS.to_vec() } else { sizes.to_vec() };
    ctx.echo("itr-ablation")?;
    for subject in subjects_of(data, &src) {
        let rows = window_ablation(&src, subject, cond, &sizes, &ctx.cfg.eval)?;
        println!("subject {subject} {cond}");
        print!("{}", ablation_table(&rows));
        write_json(&ctx.out.join(format!("itr_ablation_s{subject}_{cond}.json")), &rows)?;
    }
    Ok(())
}

fn stream_cmd(ctx: &Ctx, model_path: &Path, input: &Path) -> CliResult {
    let model = QuantizedSpeechNet::load(model_path)?;
    let rec = read_recording(input)?;
    let out = stream_classify(&ctx.cfg.stream, &model, &rec)?;
    let stdout = std::io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    for p in &out.predictions {
        let line = serde_json::to_string(p).map_err(|e| CliError::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CliError::Internal(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(u) = &out.underrun {
        eprintln!("warning: {u}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    setting: String,
    condition: Condition,
    window_ms: u32,
    subjects: Vec<u32>,
    subject_means: Vec<f64>,
    mean: f64,
    std: f64,
}

fn report_cmd(ctx: &Ctx, paths: &[std::path::PathBuf]) -> CliResult {
    let mut groups: BTreeMap<(String, String, u32), Vec<EvalReport>> = BTreeMap::new();
    for p in paths {
        let r: EvalReport = read_json(p)?;
        groups.entry((r.setting.clone(), r.condition.to_string(), r.window_ms)).or_default().push(r);
    }
    let mut rows = Vec::new();
    println!("setting       condition  window_ms  subjects  mean    std");
    for ((setting, _, window_ms), reports) in groups {
        let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
        let (mean, std) = mean_std(&means);
        let cond = reports[0].condition;
        println!("{setting:<13} {:<10} {window_ms:>9}  {:>8}  {mean:.4}  {std:.4}", cond.to_string(), reports.len());
        rows.push(SummaryRow {
            setting,
            condition: cond,
            window_ms,
            subjects: reports.iter().map(|r| r.subject).collect(),
            subject_means: means,
            mean,
            std,
        });
    }
    ctx.echo("report")?;
    write_json(&ctx.out.join("summary.json"), &rows)
}
