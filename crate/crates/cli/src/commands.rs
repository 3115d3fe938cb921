//! One function per subcommand. Every output is a function of the inputs and
//! seeds only, except `summary.json` which also records wall-clock time.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neurossl::autodiff::{Checkpoint, Scalar};
use neurossl::config::{ExperimentConfig, KvFile, Precision};
use neurossl::data::{generate_synthetic, write_recording, Event, EventTrack, SynthSpec, TrackKind};
use neurossl::dsp::{preprocess as clean, PreprocessConfig};
use neurossl::eval::{results_csv, t_test_vs_chance, ResultRow, TTestResult};
use neurossl::model::{CortexModel, DownstreamTask};
use neurossl::train::{
    checkpoint_path, evaluate_indices, evaluate_zero_shot, finetune as run_finetune, pretrain as run_pretrain, Corpus,
    FineTuneMode, LabelledSet, RunRecord,
};
use neurossl::types::Recording;
use sha2::{Digest, Sha256};

use crate::dataset::{self, Subject};
use crate::failure::{CliResult, Failure};

const TOOL: &str = concat!("neurossl ", env!("CARGO_PKG_VERSION"));
const CHANCE: f64 = 0.5;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::compat(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::compat(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::compat(format!("{}: {e}", path.display())))
}

/// Prefixes the message with the file it came from, keeping the exit code.
fn in_file<T>(path: &Path, r: neurossl::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure { code: f.code, message: format!("{}: {}", path.display(), f.message) }
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = read_text(path)?;
    in_file(path, ExperimentConfig::parse(&text))
}

/// Registers every dataset's sensor count and checks the whole experiment at
/// the data's sample rate. Returns the downstream block count.
fn prepare(cfg: &mut ExperimentConfig, subjects: &[Subject]) -> CliResult<usize> {
    for s in subjects {
        let r = &s.recording;
        let n = cfg.model.dataset_sensor_counts.entry(r.dataset_id.clone()).or_insert(r.sensors);
        if *n != r.sensors {
            return Err(Failure::compat(format!("dataset {} has {} sensors, config says {n}", r.dataset_id, r.sensors)));
        }
    }
    let fs = dataset::sample_rate(subjects)?;
    Ok(cfg.validate(fs)?.tau)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Writes a checkpoint under `out/checkpoints` and a pointer to it in the seed directory.
fn store_checkpoint(out: &Path, ck: &Checkpoint, key: &str, seed: u64) -> CliResult {
    let path = checkpoint_path(&out.join("checkpoints"), key, seed);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::compat(format!("{}: {e}", dir.display())))?;
    }
    ck.write(&path)?;
    let rel = path.strip_prefix(out).unwrap_or(&path);
    write(&seed_dir(out, seed).join("checkpoint.txt"), format!("{}\n", rel.display()))
}

fn load_checkpoint(run_dir: &Path, seed: u64) -> CliResult<Checkpoint> {
    let pointer = seed_dir(run_dir, seed).join("checkpoint.txt");
    let rel = read_text(&pointer)?;
    let path = run_dir.join(rel.trim());
    if !path.exists() {
        return Err(Failure::compat(format!("missing checkpoint {}", path.display())));
    }
    in_file(&path, Checkpoint::read(&path))
}

fn write_record(dir: &Path, name: &str, rec: &RunRecord) -> CliResult {
    write(&dir.join(format!("{name}.csv")), rec.to_csv())?;
    write(&dir.join("summary.json"), rec.summary_text())
}

/// Run-level key/value file shared by pretrain, finetune and report.
fn read_run(dir: &Path) -> CliResult<KvFile> {
    let path = dir.join("run.txt");
    let text = read_text(&path)?;
    KvFile::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn run_field(kv: &KvFile, dir: &Path, key: &str) -> CliResult<String> {
    kv.raw(key).map(str::to_string).ok_or_else(|| Failure::config(format!("{}/run.txt: schema mismatch, no `{key}`", dir.display())))
}

fn ttest(scores: &[f64]) -> TTestResult {
    t_test_vs_chance(scores, CHANCE).unwrap_or_else(|_| {
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        TTestResult { mean, sem: f64::NAN, n: scores.len(), t: f64::NAN, df: 0, p: f64::NAN }
    })
}

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let text = read_text(spec_path)?;
    let mut spec = in_file(spec_path, SynthSpec::parse(&text))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let subjects = generate_synthetic(&spec)?;
    let snapshot = spec.to_kv_string();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "tool = {TOOL}");
    let _ = writeln!(manifest, "spec_sha256 = {}", sha256_hex(snapshot.as_bytes()));
    let _ = writeln!(manifest, "seed = {}", spec.seed);
    let _ = writeln!(manifest, "dataset_id = {}", spec.dataset_id);
    let _ = writeln!(manifest, "recordings = {}", subjects.len());
    for s in &subjects {
        let name = format!("{}.hdr", s.recording.subject_id);
        write_recording(&out.join(&name), &s.recording, &[s.detection.clone(), s.voicing.clone()])?;
        let _ = writeln!(manifest, "recording.{} = {name}", s.recording.subject_id);
    }
    write(&out.join("spec.txt"), snapshot)?;
    write(&out.join("manifest.txt"), manifest)
}

/// Maps event spans onto the new sample grid. Rounding both ends keeps
/// non-overlapping events non-overlapping.
fn resample_track(track: &EventTrack, ratio: f64, total: usize) -> CliResult<EventTrack> {
    let map = |i: usize| (((i as f64) * ratio).round() as usize).min(total);
    let events = track
        .events
        .iter()
        .map(|e| {
            let onset = map(e.onset_sample);
            Event { onset_sample: onset, duration_samples: map(e.end()) - onset, class: e.class }
        })
        .filter(|e| e.duration_samples > 0)
        .collect();
    Ok(EventTrack::new(track.kind, events, total)?)
}

pub fn preprocess(data: &Path, out: &Path, target_rate: f64, notch: f64, allow_low_rate: bool) -> CliResult {
    let cfg = PreprocessConfig {
        lowpass_hz: Some(target_rate / 2.0),
        notch_base_hz: (notch > 0.0).then_some(notch),
        target_rate_hz: target_rate,
        allow_low_rate,
        ..PreprocessConfig::default()
    };
    let mut qc = String::new();
    let mut manifest = format!("tool = {TOOL}\nsource = {}\ntarget_rate_hz = {target_rate:?}\n", data.display());
    for path in dataset::headers(data)? {
        let (rec, tracks) = neurossl::data::read_recording(&path)?;
        let (cleaned, report) = in_file(&path, clean(&rec, &cfg))?;
        let ratio = cleaned.sample_rate_hz / rec.sample_rate_hz;
        let tracks = tracks.iter().map(|t| resample_track(t, ratio, cleaned.samples)).collect::<CliResult<Vec<_>>>()?;
        let name = path.file_name().expect("header path has a file name");
        write_recording(&out.join(name), &cleaned, &tracks)?;
        let _ = writeln!(qc, "# {}\n{}", rec.id(), report.to_text());
        let _ = writeln!(manifest, "recording.{} = {}", rec.subject_id, name.to_string_lossy());
    }
    write(&out.join("qc.txt"), qc)?;
    write(&out.join("manifest.txt"), manifest)
}

fn pretrain_hours(corpus: &Corpus, window_s: f64) -> f64 {
    corpus.plan.train.len() as f64 * window_s / 3600.0
}

fn pretrain_seed<T: Scalar>(cfg: &ExperimentConfig, corpus: &Corpus, labels: Option<&[Vec<usize>]>, out: &Path) -> CliResult {
    let seed = cfg.train.seed;
    let mut model = CortexModel::<T>::new(cfg.model.clone(), seed)?;
    let rec = run_pretrain(&mut model, corpus, &cfg.train, labels)?;
    write_record(&seed_dir(out, seed), "pretrain", &rec)?;
    store_checkpoint(out, &model.to_checkpoint(), &cfg.to_kv_string(), seed)
}

pub fn pretrain(config: &Path, data: &[PathBuf], out: &Path, seeds: &[u64], semi: bool) -> CliResult {
    let mut cfg = load_config(config)?;
    let subjects = dataset::load_all(data)?;
    let tau = prepare(&mut cfg, &subjects)?;
    let t = &mut cfg.train;
    t.semi_supervised_weight = match (semi, t.semi_supervised_weight) {
        (false, _) => 0.0,
        (true, w) if w > 0.0 => w,
        (true, _) => 1.0,
    };
    // the split depends on the config seed only, so every model seed sees the same split
    let split_seed = t.seed;
    let (corpus, labels) = if semi {
        let pairs = subjects.iter().map(|s| Ok((&s.recording, s.track(TrackKind::Detection)?))).collect::<CliResult<Vec<_>>>()?;
        let set = LabelledSet::detection(&pairs, t.window_s, tau, t.split_ratios, split_seed);
        (Corpus { windows: set.windows, plan: set.plan }, Some(set.labels))
    } else {
        let recs: Vec<&Recording> = subjects.iter().map(|s| &s.recording).collect();
        (Corpus::from_recordings(&recs, t.window_s, t.split_ratios, split_seed), None)
    };
    for &seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        match c.train.precision {
            Precision::F32 => pretrain_seed::<f32>(&c, &corpus, labels.as_deref(), out)?,
            Precision::F64 => pretrain_seed::<f64>(&c, &corpus, labels.as_deref(), out)?,
        }
    }
    let mut run = String::new();
    let _ = writeln!(run, "kind = pretrain");
    let _ = writeln!(run, "tool = {TOOL}");
    let _ = writeln!(run, "config_sha256 = {}", sha256_hex(cfg.to_kv_string().as_bytes()));
    let _ = writeln!(run, "seeds = {}", join(seeds));
    let _ = writeln!(run, "pretrain_hours = {:.6}", pretrain_hours(&corpus, cfg.train.window_s));
    let _ = writeln!(run, "semi_supervised_weight = {:?}", cfg.train.semi_supervised_weight);
    write(&out.join("config.txt"), cfg.to_kv_string())?;
    write(&out.join("run.txt"), run)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub struct FinetuneArgs<'a> {
    pub config: &'a Path,
    pub data: &'a [PathBuf],
    pub out: &'a Path,
    pub task: DownstreamTask,
    pub mode: FineTuneMode,
    pub pretrained: Option<&'a Path>,
    pub holdout: &'a [String],
    pub seeds: &'a [u64],
}

fn track_kind(task: DownstreamTask) -> TrackKind {
    match task {
        DownstreamTask::Speech => TrackKind::Detection,
        DownstreamTask::Voicing => TrackKind::Voicing,
    }
}

fn labelled_set(subjects: &[&Subject], task: DownstreamTask, cfg: &ExperimentConfig, tau: usize) -> CliResult<LabelledSet> {
    let pairs = subjects.iter().map(|s| Ok((&s.recording, s.track(track_kind(task))?))).collect::<CliResult<Vec<_>>>()?;
    let t = &cfg.train;
    Ok(match task {
        DownstreamTask::Speech => LabelledSet::detection(&pairs, t.window_s, tau, t.split_ratios, t.seed),
        DownstreamTask::Voicing => LabelledSet::voicing(&pairs, t.window_s, t.split_ratios, t.seed),
    })
}

/// Splits subjects into (kept, held out), checking every held-out id exists.
fn partition<'a>(subjects: &'a [Subject], heldout: &[String]) -> CliResult<(Vec<&'a Subject>, Vec<&'a Subject>)> {
    let known: BTreeSet<&str> = subjects.iter().map(|s| s.recording.subject_id.as_str()).collect();
    if let Some(h) = heldout.iter().find(|h| !known.contains(h.as_str())) {
        return Err(Failure::config(format!("held-out subject {h} is not in the data")));
    }
    Ok(subjects.iter().partition(|s| !heldout.contains(&s.recording.subject_id)))
}

fn finetune_seed<T: Scalar>(
    a: &FinetuneArgs,
    cfg: &ExperimentConfig,
    set: &LabelledSet,
    seed: u64,
) -> CliResult<f64> {
    let (mut model, backbone) = match a.pretrained {
        Some(dir) => {
            let ck = load_checkpoint(dir, seed)?;
            let digest = ck.digest(neurossl::model::is_backbone_param);
            (CortexModel::<T>::from_checkpoint(&ck)?, digest)
        }
        None => (CortexModel::<T>::new(cfg.model.clone(), seed)?, "random".to_string()),
    };
    let mut train = cfg.train.clone();
    train.seed = seed;
    let rec = run_finetune(&mut model, set, a.mode, &train)?;
    let dir = seed_dir(a.out, seed);
    write_record(&dir, "finetune", &rec)?;
    let used: Vec<usize> = set.plan.train.iter().chain(&set.plan.val).copied().collect();
    let subjects: Vec<String> = set.subjects(&used).into_iter().collect();
    write(&dir.join("subjects.txt"), subjects.iter().map(|s| format!("{s}\n")).collect::<String>())?;
    let key = format!("{}task = {}\nmode = {}\nbackbone = {backbone}\n", rec.config, a.task.name(), a.mode.name());
    store_checkpoint(a.out, &model.to_checkpoint(), &key, seed)?;
    Ok(rec.summary_value("test_bacc").unwrap_or(f64::NAN))
}

pub fn finetune(a: &FinetuneArgs) -> CliResult {
    let mut cfg = load_config(a.config)?;
    let subjects = dataset::load_all(a.data)?;
    let tau = prepare(&mut cfg, &subjects)?;
    let (kept, _) = partition(&subjects, a.holdout)?;
    if kept.is_empty() {
        return Err(Failure::config("every subject is held out"));
    }
    let set = labelled_set(&kept, a.task, &cfg, tau)?;
    let (backbone, hours) = match a.pretrained {
        Some(dir) => ("pretrained", run_field(&read_run(dir)?, dir, "pretrain_hours")?),
        None => ("random", "0.000000".to_string()),
    };
    let mut scores = Vec::new();
    for &seed in a.seeds {
        scores.push(match cfg.train.precision {
            Precision::F32 => finetune_seed::<f32>(a, &cfg, &set, seed)?,
            Precision::F64 => finetune_seed::<f64>(a, &cfg, &set, seed)?,
        });
    }
    let t = ttest(&scores);
    let label = format!("{}-{}-{backbone}", a.task.name(), a.mode.name());
    write(&a.out.join("summary.csv"), results_csv(&[ResultRow { label, test: t }]))?;
    let mut run = String::new();
    let _ = writeln!(run, "kind = finetune");
    let _ = writeln!(run, "tool = {TOOL}");
    let _ = writeln!(run, "config_sha256 = {}", sha256_hex(cfg.to_kv_string().as_bytes()));
    let _ = writeln!(run, "task = {}", a.task.name());
    let _ = writeln!(run, "mode = {}", a.mode.name());
    let _ = writeln!(run, "backbone = {backbone}");
    let _ = writeln!(run, "pretrain_hours = {hours}");
    let _ = writeln!(run, "seeds = {}", join(a.seeds));
    let _ = writeln!(run, "holdout = {}", a.holdout.join(","));
    let _ = writeln!(run, "mean = {:.6}", t.mean);
    let _ = writeln!(run, "sem = {:.6}", t.sem);
    let _ = writeln!(run, "n = {}", t.n);
    let _ = writeln!(run, "t = {:.4}", t.t);
    let _ = writeln!(run, "p = {:.3e}", t.p);
    write(&a.out.join("config.txt"), cfg.to_kv_string())?;
    write(&a.out.join("run.txt"), run)
}

fn evaluate_seed<T: Scalar>(
    ck: &Checkpoint,
    cfg: &ExperimentConfig,
    sets: &(LabelledSet, Option<LabelledSet>),
    heldout: &[String],
) -> CliResult<Vec<f64>> {
    let model = CortexModel::<T>::from_checkpoint(ck)?;
    match &sets.1 {
        Some(unseen) => {
            let rec = evaluate_zero_shot(&model, &sets.0, unseen, heldout, &cfg.train)?;
            Ok(vec![rec.summary_value("seen_bacc").unwrap_or(f64::NAN), rec.summary_value("unseen_bacc").unwrap_or(f64::NAN)])
        }
        None => {
            let c = evaluate_indices(&model, &sets.0, &sets.0.plan.test, cfg.train.batch_size)?;
            Ok(vec![c.balanced_accuracy()?])
        }
    }
}

pub fn evaluate(
    config: &Path,
    data: &[PathBuf],
    finetuned: &Path,
    out: &Path,
    zero_shot: bool,
    heldout: &[String],
    seeds: &[u64],
) -> CliResult {
    let mut cfg = load_config(config)?;
    let subjects = dataset::load_all(data)?;
    let tau = prepare(&mut cfg, &subjects)?;
    let run = read_run(finetuned)?;
    let task: DownstreamTask = run_field(&run, finetuned, "task")?.parse().map_err(Failure::config)?;
    let heldout: &[String] = if zero_shot { heldout } else { &[] };
    let (kept, held) = partition(&subjects, heldout)?;
    let sets = if zero_shot {
        (labelled_set(&kept, task, &cfg, tau)?, Some(labelled_set(&held, task, &cfg, tau)?.all_test()))
    } else {
        (labelled_set(&kept, task, &cfg, tau)?, None)
    };
    let columns: &[&str] = if zero_shot { &["seen_bacc", "unseen_bacc"] } else { &["test_bacc"] };
    let mut table = format!("seed,{}\n", columns.join(","));
    let mut per_column = vec![Vec::new(); columns.len()];
    for &seed in seeds {
        let trained = read_text(&seed_dir(finetuned, seed).join("subjects.txt"))?;
        if let Some(h) = heldout.iter().find(|h| trained.lines().any(|l| l == h.as_str())) {
            return Err(neurossl::Error::Leakage(h.clone()).into());
        }
        let ck = load_checkpoint(finetuned, seed)?;
        let scores = match cfg.train.precision {
            Precision::F32 => evaluate_seed::<f32>(&ck, &cfg, &sets, heldout)?,
            Precision::F64 => evaluate_seed::<f64>(&ck, &cfg, &sets, heldout)?,
        };
        let _ = writeln!(table, "{seed},{}", join(&scores));
        for (c, v) in per_column.iter_mut().zip(scores) {
            c.push(v);
        }
    }
    let rows: Vec<ResultRow> =
        columns.iter().zip(&per_column).map(|(c, v)| ResultRow { label: format!("{}-{c}", task.name()), test: ttest(v) }).collect();
    write(&out.join("evaluation.csv"), table)?;
    write(&out.join("summary.csv"), results_csv(&rows))
}

const REPORT_KEYS: [&str; 9] = ["task", "mode", "backbone", "pretrain_hours", "mean", "sem", "n", "t", "p"];

/// Directories holding a `run.txt`: the argument itself or its immediate children.
fn run_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("run.txt").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Failure::compat(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("run.txt").exists()).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::config(format!("{}: no runs found", root.display())));
    }
    Ok(dirs)
}

pub fn report(runs: &[PathBuf], out: &Path) -> CliResult {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for root in runs {
        for dir in run_dirs(root)? {
            let kv = read_run(&dir)?;
            if run_field(&kv, &dir, "kind")? != "finetune" {
                return Err(Failure::config(format!("{}/run.txt: schema mismatch, not a fine-tuning run", dir.display())));
            }
            rows.push(REPORT_KEYS.iter().map(|k| run_field(&kv, &dir, k)).collect::<CliResult<_>>()?);
        }
    }
    let hours = |r: &Vec<String>| r[3].parse::<f64>().unwrap_or(f64::NAN);
    rows.sort_by(|a, b| (&a[0], &a[1], &a[2]).cmp(&(&b[0], &b[1], &b[2])).then(hours(a).total_cmp(&hours(b))));
    let mut table = format!("{}\n", REPORT_KEYS.join(","));
    for r in &rows {
        let _ = writeln!(table, "{}", r.join(","));
    }
    write(&out.join("report.csv"), table)?;
    let tasks: BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    for task in tasks {
        let mut series = String::from("mode,backbone,pretrain_hours,mean,sem\n");
        for r in rows.iter().filter(|r| r[0] == task) {
            let _ = writeln!(series, "{},{},{},{},{}", r[1], r[2], r[3], r[4], r[5]);
        }
        write(&out.join(format!("series-{task}.csv")), series)?;
    }
    Ok(())
}
