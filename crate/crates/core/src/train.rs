//! Pre-training on pretext labels, shallow/deep fine-tuning with early
//! stopping, zero-shot evaluation on held-out subjects, and run records.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, Graph, Scalar};
use crate::config::TrainConfig;
use crate::data::{align_detection_labels, align_voicing_windows, make_windows, plan_splits, EventTrack, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::ConfusionCounts;
use crate::model::{argmax_rows, standardize_batch, CortexModel, DownstreamTask};
use crate::pretext::{sample_pretext_batch, ssl_loss, PretextTask};
use crate::rng::Rng;
use crate::types::{Recording, Window};

/// Windows plus a temporal split, for pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub windows: Vec<Window>,
    pub plan: SplitPlan,
}

impl Corpus {
    pub fn from_recordings(recs: &[&Recording], window_s: f64, ratios: [f64; 3], seed: u64) -> Self {
        let windows: Vec<Window> = recs.iter().flat_map(|r| make_windows(r, window_s)).collect();
        let plan = plan_splits(&windows, ratios, seed);
        Corpus { windows, plan }
    }
}

/// Windows with downstream labels: `tau` block labels each for speech, one label for voicing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSet {
    pub task: DownstreamTask,
    pub windows: Vec<Window>,
    pub labels: Vec<Vec<usize>>,
    pub plan: SplitPlan,
}

impl LabelledSet {
    pub fn detection(recs: &[(&Recording, &EventTrack)], window_s: f64, tau: usize, ratios: [f64; 3], seed: u64) -> Self {
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for (rec, track) in recs {
            for w in make_windows(rec, window_s) {
                labels.push(align_detection_labels(&w, track, tau));
                windows.push(w);
            }
        }
        let plan = plan_splits(&windows, ratios, seed);
        LabelledSet { task: DownstreamTask::Speech, windows, labels, plan }
    }

    pub fn voicing(recs: &[(&Recording, &EventTrack)], window_s: f64, ratios: [f64; 3], seed: u64) -> Self {
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for (rec, track) in recs {
            for (w, c) in align_voicing_windows(track, rec, window_s) {
                windows.push(w);
                labels.push(vec![c]);
            }
        }
        let plan = plan_splits(&windows, ratios, seed);
        LabelledSet { task: DownstreamTask::Voicing, windows, labels, plan }
    }

    /// Same windows, every index in the test split (for evaluation-only sets).
    pub fn all_test(mut self) -> Self {
        let n = self.windows.len();
        self.plan = SplitPlan { train: Vec::new(), val: Vec::new(), test: (0..n).collect() };
        self
    }

    pub fn subjects(&self, indices: &[usize]) -> BTreeSet<String> {
        indices.iter().map(|&i| self.windows[i].subject_id.clone()).collect()
    }
}

/// Per-epoch metrics table plus run-level summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Epoch (1-based) with the best validation score.
    pub best_epoch: usize,
    pub seed: u64,
    pub config: String,
    pub wall_clock_s: f64,
    pub summary: Vec<(String, f64)>,
}

impl RunRecord {
    fn new(kind: &str, columns: &[&str], seed: u64, config: String) -> Self {
        RunRecord {
            kind: kind.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            best_epoch: 0,
            seed,
            config,
            wall_clock_s: 0.0,
            summary: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One row per epoch. Contains no timing, so reruns produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut s = format!("epoch,{}\n", self.columns.join(","));
        for (e, r) in self.rows.iter().enumerate() {
            let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{},{}\n", e + 1, vals.join(",")));
        }
        s
    }

    /// JSON object with the summary values, best epoch, seed and wall clock.
    pub fn summary_text(&self) -> String {
        let mut fields = vec![
            format!("  \"kind\": \"{}\"", self.kind),
            format!("  \"seed\": {}", self.seed),
            format!("  \"best_epoch\": {}", self.best_epoch),
        ];
        for (k, v) in &self.summary {
            let v = if v.is_finite() { v.to_string() } else { "null".into() };
            fields.push(format!("  \"{k}\": {v}"));
        }
        fields.push(format!("  \"wall_clock_s\": {:.3}", self.wall_clock_s));
        format!("{{\n{}\n}}\n", fields.join(",\n"))
    }
}

/// Content-addressed checkpoint location for a config snapshot and seed.
pub fn checkpoint_path(dir: &Path, config_text: &str, seed: u64) -> PathBuf {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    h.update(seed.to_le_bytes());
    let hex: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    dir.join(format!("{hex}-seed{seed}.ckpt"))
}

/// Fixed-order evaluation batches: grouped by dataset, index order, chunked.
fn ordered_batches(windows: &[Window], indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for &i in indices {
        groups.entry(windows[i].dataset_id.as_str()).or_default().push(i);
    }
    groups.values().flat_map(|g| g.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect()
}

fn gather(windows: &[Window], idx: &[usize]) -> Vec<Window> {
    idx.iter().map(|&i| windows[i].clone()).collect()
}

fn check_finite(v: f64, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

struct PretextOutcome {
    value: f64,
    components: [f64; 3],
    hits: [usize; 3],
}

/// Builds the three augmented forwards and the weighted loss for one batch.
fn pretext_forward<T: Scalar>(
    model: &CortexModel<T>,
    g: &mut Graph<T>,
    batch: &[Window],
    rng: &Rng,
    cfg: &TrainConfig,
) -> Result<(crate::pretext::SslLoss, PretextOutcome)> {
    let pb = sample_pretext_batch(rng, batch, cfg);
    let mut logits = Vec::with_capacity(3);
    let mut labels = Vec::with_capacity(3);
    for (i, task) in PretextTask::ALL.iter().enumerate() {
        let y = model.forward_backbone(g, &pb.windows(*task))?;
        logits.push(model.forward_pretext(g, y)?[i]);
        labels.push(pb.labels(*task));
    }
    let logits = [logits[0], logits[1], logits[2]];
    let loss = ssl_loss(g, logits, [&labels[0], &labels[1], &labels[2]], cfg.loss_weights)?;
    let mut hits = [0; 3];
    for i in 0..3 {
        hits[i] = argmax_rows(g.value(logits[i])).iter().zip(&labels[i]).filter(|(p, y)| p == y).count();
    }
    let outcome = PretextOutcome { value: loss.value, components: loss.components, hits };
    Ok((loss, outcome))
}

/// Held-out pretext accuracy per task with a transform draw that is fixed across epochs.
pub fn pretext_accuracy<T: Scalar>(
    model: &CortexModel<T>,
    windows: &[Window],
    indices: &[usize],
    cfg: &TrainConfig,
    label: &str,
) -> Result<[f64; 3]> {
    let root = Rng::new(cfg.seed).fork("pretext-eval").fork(label);
    let mut hits = [0usize; 3];
    let mut total = 0;
    for (b, idx) in ordered_batches(windows, indices, cfg.batch_size).iter().enumerate() {
        let batch = standardize_batch(&gather(windows, idx))?;
        let mut g = Graph::new();
        let (_, out) = pretext_forward(model, &mut g, &batch, &root.fork(&format!("batch/{b}")), cfg)?;
        for i in 0..3 {
            hits[i] += out.hits[i];
        }
        total += batch.len();
    }
    if total == 0 {
        return Ok([f64::NAN; 3]);
    }
    Ok(hits.map(|h| h as f64 / total as f64))
}

pub const PRETRAIN_COLUMNS: [&str; 12] = [
    "loss",
    "loss_band",
    "loss_phase",
    "loss_amplitude",
    "loss_semi",
    "train_acc_mean",
    "val_band",
    "val_phase",
    "val_amplitude",
    "test_band",
    "test_phase",
    "test_amplitude",
];

/// Self-supervised pre-training. `semi_labels`, aligned with `corpus.windows`,
/// enables the auxiliary detection loss when `cfg.semi_supervised_weight > 0`.
pub fn pretrain<T: Scalar>(
    model: &mut CortexModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    semi_labels: Option<&[Vec<usize>]>,
) -> Result<RunRecord> {
    let started = Instant::now();
    let windows = &corpus.windows;
    if corpus.plan.train.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    let subjects: Vec<String> = corpus.plan.train.iter().map(|&i| windows[i].subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    model.register_subjects(&subjects)?;
    let semi = if cfg.semi_supervised_weight > 0.0 { semi_labels } else { None };
    if semi.is_some() {
        model.ensure_semi_head()?;
    }
    let mut opt = AdamW::<T>::new(cfg.learning_rate, cfg.weight_decay);
    let root = Rng::new(cfg.seed).fork("pretrain");
    let mut rec = RunRecord::new("pretrain", &PRETRAIN_COLUMNS, cfg.seed, crate::config::ExperimentConfig { model: model.config.clone(), train: cfg.clone() }.to_kv_string());
    let mut best = f64::NEG_INFINITY;
    for epoch in 1..=cfg.pretrain_epochs {
        let erng = root.fork(&format!("epoch/{epoch}"));
        let batches = crate::data::batch_iter(&corpus.plan.train, |i| windows[i].dataset_id.as_str(), cfg.batch_size, &mut erng.fork("batches"));
        let (mut sum, mut comps, mut semi_sum, mut hits, mut seen) = (0.0, [0.0; 3], 0.0, 0usize, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let batch = standardize_batch(&gather(windows, idx))?;
            let mut g = Graph::new();
            let (loss, out) = pretext_forward(model, &mut g, &batch, &erng.fork(&format!("batch/{b}")), cfg)?;
            let mut total = loss.total;
            let mut value = out.value;
            if let Some(labels) = semi {
                let y = model.forward_backbone(&mut g, &batch)?;
                let logits = model.forward_semi(&mut g, y)?;
                let flat: Vec<usize> = idx.iter().flat_map(|&i| labels[i].iter().copied()).collect();
                let ce = g.cross_entropy(logits, &flat)?;
                let ce_value = g.value(ce).item().as_f64();
                semi_sum += ce_value;
                value += cfg.semi_supervised_weight * ce_value;
                let term = g.scale(ce, T::cast_from(cfg.semi_supervised_weight));
                total = g.add(total, term)?;
            }
            check_finite(value, epoch, b)?;
            g.backward(total)?;
            opt.step(&mut model.store, &g.param_grads());
            sum += value;
            for i in 0..3 {
                comps[i] += out.components[i];
            }
            hits += out.hits.iter().sum::<usize>();
            seen += 3 * batch.len();
        }
        let nb = batches.len() as f64;
        let val = pretext_accuracy(model, windows, &corpus.plan.val, cfg, "val")?;
        let test = pretext_accuracy(model, windows, &corpus.plan.test, cfg, "test")?;
        let mut row = vec![sum / nb, comps[0] / nb, comps[1] / nb, comps[2] / nb, if semi.is_some() { semi_sum / nb } else { 0.0 }];
        row.push(hits as f64 / seen as f64);
        row.extend(val);
        row.extend(test);
        rec.rows.push(row);
        let score = val.iter().sum::<f64>() / 3.0;
        if score > best || rec.best_epoch == 0 {
            best = score;
            rec.best_epoch = epoch;
        }
    }
    let last = rec.rows.last().cloned().unwrap_or_default();
    let at_best = rec.rows.get(rec.best_epoch.wrapping_sub(1)).cloned().unwrap_or_default();
    for (i, name) in PRETRAIN_COLUMNS.iter().enumerate().skip(6) {
        rec.summary.push((format!("final_{name}"), last.get(i).copied().unwrap_or(f64::NAN)));
    }
    rec.summary.push(("final_loss".into(), last.first().copied().unwrap_or(f64::NAN)));
    rec.summary.push(("best_val_mean".into(), at_best.get(6..9).map_or(f64::NAN, |v| v.iter().sum::<f64>() / 3.0)));
    rec.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    Shallow,
    Deep,
}

impl FineTuneMode {
    pub fn name(&self) -> &'static str {
        match self {
            FineTuneMode::Shallow => "shallow",
            FineTuneMode::Deep => "deep",
        }
    }
}

impl std::str::FromStr for FineTuneMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shallow" => Ok(FineTuneMode::Shallow),
            "deep" => Ok(FineTuneMode::Deep),
            _ => Err(format!("unknown mode {s:?} (expected shallow or deep)")),
        }
    }
}

/// Downstream logits and the flattened labels they score.
fn task_forward<T: Scalar>(
    model: &CortexModel<T>,
    g: &mut Graph<T>,
    set: &LabelledSet,
    idx: &[usize],
) -> Result<(crate::autodiff::Var, Vec<usize>)> {
    let batch = standardize_batch(&gather(&set.windows, idx))?;
    let y = model.forward_backbone(g, &batch)?;
    let logits = model.forward_task(g, y, set.task)?;
    let flat: Vec<usize> = idx.iter().flat_map(|&i| set.labels[i].iter().copied()).collect();
    Ok((logits, flat))
}

/// Confusion counts of `model` on `indices` of `set`, in fixed batch order.
pub fn evaluate_indices<T: Scalar>(model: &CortexModel<T>, set: &LabelledSet, indices: &[usize], batch_size: usize) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(2);
    for idx in ordered_batches(&set.windows, indices, batch_size) {
        let mut g = Graph::new();
        let (logits, labels) = task_forward(model, &mut g, set, &idx)?;
        for (p, y) in argmax_rows(g.value(logits)).into_iter().zip(labels) {
            counts.record(p, y)?;
        }
    }
    Ok(counts)
}

fn bacc_or_nan(c: Result<ConfusionCounts>) -> Result<f64> {
    let c = c?;
    Ok(if c.total() == 0 { f64::NAN } else { c.balanced_accuracy()? })
}

pub const FINETUNE_COLUMNS: [&str; 3] = ["loss", "val_bacc", "test_bacc"];

/// Trains the downstream head (shallow) or head and backbone (deep) on `set`.
/// Datasets the model has not seen get a fresh, trainable projection. The model
/// is left at its best-validation state; the recorded test score is the one at
/// that epoch.
pub fn finetune<T: Scalar>(model: &mut CortexModel<T>, set: &LabelledSet, mode: FineTuneMode, cfg: &TrainConfig) -> Result<RunRecord> {
    let started = Instant::now();
    if set.plan.train.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    let mut new_projections = Vec::new();
    for w in &set.windows {
        if !model.has_dataset(&w.dataset_id) {
            model.register_dataset(&w.dataset_id, w.sensors)?;
            new_projections.push(w.dataset_id.clone());
        } else if model.datasets().any(|(d, s)| d == w.dataset_id && s != w.sensors) {
            return Err(Error::shape(format!("dataset {} has {} sensors, checkpoint expects otherwise", w.dataset_id, w.sensors)));
        }
    }
    // new subjects only get learnable rows when the backbone trains; under
    // shallow tuning they keep the fixed stand-in embedding
    if mode == FineTuneMode::Deep {
        let subjects: Vec<String> = set.subjects(&set.plan.train).into_iter().collect();
        model.register_subjects(&subjects)?;
    }
    let tau = match set.task {
        DownstreamTask::Speech => 1,
        DownstreamTask::Voicing => {
            let t = set.windows[0].samples;
            let p = model.config.downsampling_product();
            if t % p != 0 {
                return Err(Error::shape(format!("window of {t} samples is not divisible by {p}")));
            }
            t / p
        }
    };
    model.ensure_head(set.task, tau)?;
    match mode {
        FineTuneMode::Shallow => model.freeze_for_shallow(&new_projections),
        FineTuneMode::Deep => model.unfreeze_all(),
    }
    let mut opt = AdamW::<T>::new(cfg.learning_rate, cfg.weight_decay);
    let root = Rng::new(cfg.seed).fork("finetune").fork(set.task.name());
    let mut rec = RunRecord::new(
        &format!("finetune-{}-{}", set.task.name(), mode.name()),
        &FINETUNE_COLUMNS,
        cfg.seed,
        crate::config::ExperimentConfig { model: model.config.clone(), train: cfg.clone() }.to_kv_string(),
    );
    let mut best_val = f64::NEG_INFINITY;
    let mut best_store = model.store.clone();
    for epoch in 1..=cfg.finetune_epochs {
        let mut brng = root.fork(&format!("epoch/{epoch}"));
        let batches = crate::data::batch_iter(&set.plan.train, |i| set.windows[i].dataset_id.as_str(), cfg.batch_size, &mut brng);
        let mut sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let (logits, labels) = task_forward(model, &mut g, set, idx)?;
            let ce = g.cross_entropy(logits, &labels)?;
            let v = g.value(ce).item().as_f64();
            check_finite(v, epoch, b)?;
            g.backward(ce)?;
            opt.step(&mut model.store, &g.param_grads());
            sum += v;
        }
        let val = bacc_or_nan(evaluate_indices(model, set, &set.plan.val, cfg.batch_size))?;
        let test = bacc_or_nan(evaluate_indices(model, set, &set.plan.test, cfg.batch_size))?;
        rec.rows.push(vec![sum / batches.len() as f64, val, test]);
        if val > best_val || rec.best_epoch == 0 {
            best_val = val;
            rec.best_epoch = epoch;
            best_store = model.store.clone();
        }
    }
    model.store = best_store;
    let best = rec.rows.get(rec.best_epoch.wrapping_sub(1)).cloned().unwrap_or_else(|| vec![f64::NAN; 3]);
    rec.summary.push(("best_val_bacc".into(), best[1]));
    rec.summary.push(("test_bacc".into(), best[2]));
    rec.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(rec)
}

/// Scores a fine-tuned model separately on the test split of subjects it was
/// trained on and on held-out subjects, who get random stand-in embeddings.
pub fn evaluate_zero_shot<T: Scalar>(
    model: &CortexModel<T>,
    seen: &LabelledSet,
    unseen: &LabelledSet,
    heldout: &[String],
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let started = Instant::now();
    let used: Vec<usize> = seen.plan.train.iter().chain(&seen.plan.val).copied().collect();
    let training = seen.subjects(&used);
    for h in heldout {
        if training.contains(h) || model.is_seen_subject(h) {
            return Err(Error::Leakage(h.clone()));
        }
    }
    let held: BTreeSet<&str> = heldout.iter().map(String::as_str).collect();
    let unseen_idx: Vec<usize> = (0..unseen.windows.len()).filter(|&i| held.contains(unseen.windows[i].subject_id.as_str())).collect();
    let seen_idx: Vec<usize> = seen.plan.test.iter().copied().filter(|&i| !held.contains(seen.windows[i].subject_id.as_str())).collect();
    let s = bacc_or_nan(evaluate_indices(model, seen, &seen_idx, cfg.batch_size))?;
    let u = bacc_or_nan(evaluate_indices(model, unseen, &unseen_idx, cfg.batch_size))?;
    let mut rec = RunRecord::new("zero-shot", &["seen_bacc", "unseen_bacc"], cfg.seed, String::new());
    rec.rows.push(vec![s, u]);
    rec.best_epoch = 1;
    rec.summary = vec![("seen_bacc".into(), s), ("unseen_bacc".into(), u), ("seen_windows".into(), seen_idx.len() as f64), ("unseen_windows".into(), unseen_idx.len() as f64)];
    rec.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(rec)
}
