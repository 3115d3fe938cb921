//! The encoder architecture and its heads.
//!
//! Input windows `[B, S_d, t]` pass through a dataset-specific projection to
//! `d_shared` channels, then one stage per downsampling ratio (a residual unit
//! of two `k=3` convolutions followed by a strided `k=2s` convolution), and
//! finally optional subject conditioning at the bottleneck. The backbone output
//! `[B, C, tau]` feeds either the pretext path (mean over time, projector,
//! three linear classifiers) or a downstream head.

use std::collections::BTreeMap;

use crate::autodiff::{kaiming_uniform, scaled_normal, Checkpoint, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::config::{ConditioningMode, ModelConfig};
use crate::error::{Error, Result};
use crate::pretext::{AMPLITUDE_CLASSES, BAND_CLASSES, PHASE_CLASSES};
use crate::rng::{label_hash, Rng};
use crate::types::Window;

const STD_EPS: f64 = 1e-8;

/// Per-sensor standardisation with statistics pooled over every window and time point of the batch.
pub fn standardize_batch(batch: &[Window]) -> Result<Vec<Window>> {
    let Some(first) = batch.first() else { return Ok(Vec::new()) };
    let (s, t) = (first.sensors, first.samples);
    if batch.iter().any(|w| w.sensors != s || w.samples != t || w.dataset_id != first.dataset_id) {
        return Err(Error::shape("standardize_batch needs windows of one dataset and one shape"));
    }
    let count = (batch.len() * t) as f64;
    let mut out = batch.to_vec();
    for sensor in 0..s {
        let mean = batch.iter().flat_map(|w| w.row(sensor)).sum::<f64>() / count;
        let var = batch.iter().flat_map(|w| w.row(sensor)).map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let denom = var.sqrt() + STD_EPS;
        for w in &mut out {
            w.row_mut(sensor).iter_mut().for_each(|v| *v = (*v - mean) / denom);
        }
    }
    out.iter_mut().for_each(|w| w.standardised = true);
    Ok(out)
}

/// Stacks same-shape windows into `[B, S, t]`.
pub fn batch_tensor<T: Scalar>(batch: &[Window]) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let (s, t) = (first.sensors, first.samples);
    if batch.iter().any(|w| w.sensors != s || w.samples != t) {
        return Err(Error::shape("windows in a batch must share one shape"));
    }
    let data = batch.iter().flat_map(|w| w.data.iter().map(|&v| T::cast_from(v))).collect();
    Tensor::new(vec![batch.len(), s, t], data)
}

/// Row-wise argmax of a `[.., K]` tensor.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape.last().unwrap_or(&1);
    logits
        .data
        .chunks(k)
        .map(|r| r.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
        .collect()
}

/// Parameters that make up the backbone: projections, encoder stages and conditioning.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("projection.") || name.starts_with("encoder.") || name.starts_with("conditioning.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DownstreamTask {
    Speech,
    Voicing,
}

impl DownstreamTask {
    pub fn name(&self) -> &'static str {
        match self {
            DownstreamTask::Speech => "speech",
            DownstreamTask::Voicing => "voicing",
        }
    }
}

impl std::str::FromStr for DownstreamTask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "speech" => Ok(DownstreamTask::Speech),
            "voicing" => Ok(DownstreamTask::Voicing),
            _ => Err(format!("unknown task {s:?} (expected speech or voicing)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mlp {
    first: Layer,
    second: Layer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stage {
    res_a: Layer,
    res_b: Layer,
    down: Layer,
    stride: usize,
    kernel: usize,
    pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Conditioning {
    table: ParamId,
    film: Option<(Layer, Layer)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CortexModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    seed: u64,
    projections: BTreeMap<String, Layer>,
    stages: Vec<Stage>,
    conditioning: Option<Conditioning>,
    subjects: BTreeMap<String, usize>,
    subject_order: Vec<String>,
    projector: Mlp,
    pretext_heads: [Layer; 3],
    heads: BTreeMap<DownstreamTask, Mlp>,
    semi_head: Option<Mlp>,
}

fn init_rng(seed: u64, name: &str) -> Rng {
    Rng::new(seed).fork(name)
}

fn add_linear<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: &str, out: usize, inp: usize) -> Result<Layer> {
    let w = store.add(format!("{name}.weight"), kaiming_uniform(&mut init_rng(seed, name), &[out, inp], inp))?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?;
    Ok(Layer { w, b })
}

fn add_conv<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: &str, out: usize, inp: usize, k: usize) -> Result<Layer> {
    let w = store.add(format!("{name}.weight"), kaiming_uniform(&mut init_rng(seed, name), &[out, inp, k], inp * k))?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?;
    Ok(Layer { w, b })
}

fn add_mlp<T: Scalar>(store: &mut ParamStore<T>, seed: u64, name: &str, inp: usize, hidden: usize, out: usize) -> Result<Mlp> {
    Ok(Mlp {
        first: add_linear(store, seed, &format!("{name}.0"), hidden, inp)?,
        second: add_linear(store, seed, &format!("{name}.1"), out, hidden)?,
    })
}

impl Layer {
    fn linear<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, Some(b))
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv1d(x, w, Some(b), stride, pad)
    }
}

impl Mlp {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.linear(g, store, x)?;
        let h = g.elu(h);
        self.second.linear(g, store, h)
    }
}

impl<T: Scalar> CortexModel<T> {
    /// Builds a freshly initialised model with one projection per entry of
    /// `config.dataset_sensor_counts`. Every parameter's initial value depends
    /// only on `seed` and its name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let datasets = config.dataset_sensor_counts.clone();
        let ch = &config.conv_channels;
        if ch.len() != config.downsampling_ratios.len() + 1 || ch[0] != config.d_shared {
            return Err(Error::shape("conv_channels must hold d_shared, then one width per downsampling ratio"));
        }
        let mut stages = Vec::new();
        for (i, &s) in config.downsampling_ratios.iter().enumerate() {
            let (cin, cout) = (ch[i], ch[i + 1]);
            let (kernel, pad) = if s == 1 { (1, 0) } else { (2 * s, s.div_ceil(2)) };
            stages.push(Stage {
                res_a: add_conv(&mut store, seed, &format!("encoder.{i}.res_a"), cin, cin, 3)?,
                res_b: add_conv(&mut store, seed, &format!("encoder.{i}.res_b"), cin, cin, 3)?,
                down: add_conv(&mut store, seed, &format!("encoder.{i}.down"), cout, cin, kernel)?,
                stride: s,
                kernel,
                pad,
            });
        }
        let dim = config.conditioning_dim;
        let conditioning = match config.conditioning_mode {
            ConditioningMode::None => None,
            mode => {
                let table = store.add("conditioning.subjects", Tensor::zeros(&[0, dim]))?;
                let film = if mode == ConditioningMode::Film {
                    let c = config.d_backbone;
                    let gw = store.add("conditioning.film_gamma.weight", Tensor::zeros(&[c, dim]))?;
                    let gb = store.add("conditioning.film_gamma.bias", Tensor::filled(&[c], T::one()))?;
                    let bw = store.add("conditioning.film_beta.weight", Tensor::zeros(&[c, dim]))?;
                    let bb = store.add("conditioning.film_beta.bias", Tensor::zeros(&[c]))?;
                    Some((Layer { w: gw, b: gb }, Layer { w: bw, b: bb }))
                } else {
                    None
                };
                Some(Conditioning { table, film })
            }
        };
        let out_ch = config.backbone_out_channels();
        let projector = add_mlp(&mut store, seed, "projector", out_ch, config.projector_hidden, out_ch)?;
        let pretext_heads = [
            add_linear(&mut store, seed, "pretext.band", BAND_CLASSES, out_ch)?,
            add_linear(&mut store, seed, "pretext.phase", PHASE_CLASSES, out_ch)?,
            add_linear(&mut store, seed, "pretext.amplitude", AMPLITUDE_CLASSES, out_ch)?,
        ];
        let mut model = CortexModel {
            config: ModelConfig { dataset_sensor_counts: BTreeMap::new(), ..config },
            store,
            seed,
            projections: BTreeMap::new(),
            stages,
            conditioning,
            subjects: BTreeMap::new(),
            subject_order: Vec::new(),
            projector,
            pretext_heads,
            heads: BTreeMap::new(),
            semi_head: None,
        };
        for (ds, s) in datasets {
            model.register_dataset(&ds, s)?;
        }
        Ok(model)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&str, usize)> {
        self.config.dataset_sensor_counts.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn has_dataset(&self, dataset_id: &str) -> bool {
        self.projections.contains_key(dataset_id)
    }

    /// Adds a fresh `S_new → d_shared` projection for a new dataset.
    pub fn register_dataset(&mut self, dataset_id: &str, sensors: usize) -> Result<()> {
        if self.projections.contains_key(dataset_id) {
            return Err(Error::Duplicate(format!("dataset {dataset_id}")));
        }
        if sensors == 0 {
            return Err(Error::shape(format!("dataset {dataset_id} has no sensors")));
        }
        let name = format!("projection.{dataset_id}");
        let layer = add_conv(&mut self.store, self.seed, &name, self.config.d_shared, sensors, 1)?;
        self.projections.insert(dataset_id.to_string(), layer);
        self.config.dataset_sensor_counts.insert(dataset_id.to_string(), sensors);
        Ok(())
    }

    /// Gives each new subject a learnable embedding row. No-op without conditioning.
    pub fn register_subjects<S: AsRef<str>>(&mut self, ids: &[S]) -> Result<()> {
        let Some(cond) = &self.conditioning else { return Ok(()) };
        let table = cond.table;
        let dim = self.config.conditioning_dim;
        for id in ids {
            let id = id.as_ref();
            if self.subjects.contains_key(id) {
                continue;
            }
            if id.contains(',') {
                return Err(Error::shape(format!("subject id {id:?} may not contain commas")));
            }
            let row = scaled_normal::<T>(&mut init_rng(self.seed, &format!("conditioning.subject/{id}")), &[1, dim]);
            let p = &mut self.store.get_mut(table).value;
            p.data.extend_from_slice(&row.data);
            p.shape[0] += 1;
            self.subjects.insert(id.to_string(), self.subject_order.len());
            self.subject_order.push(id.to_string());
        }
        Ok(())
    }

    pub fn subjects(&self) -> &[String] {
        &self.subject_order
    }

    pub fn is_seen_subject(&self, id: &str) -> bool {
        self.subjects.contains_key(id)
    }

    /// Random stand-in embedding for a subject without a learned row; fixed per (model seed, id).
    pub fn unseen_embedding(&self, id: &str) -> Tensor<T> {
        let mut rng = Rng::new(self.seed ^ label_hash(id)).fork("unseen-subject");
        scaled_normal(&mut rng, &[1, self.config.conditioning_dim])
    }

    /// Creates the downstream head for `task` if absent. `tau` fixes the voicing head's input width.
    pub fn ensure_head(&mut self, task: DownstreamTask, tau: usize) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Ok(());
        }
        let c = self.config.backbone_out_channels();
        let inp = match task {
            DownstreamTask::Speech => c,
            DownstreamTask::Voicing => c * tau,
        };
        let mlp = add_mlp(&mut self.store, self.seed, &format!("head.{}", task.name()), inp, self.config.head_hidden, 2)?;
        self.heads.insert(task, mlp);
        Ok(())
    }

    pub fn has_head(&self, task: DownstreamTask) -> bool {
        self.heads.contains_key(&task)
    }

    /// Per-embedding detection head used by the semi-supervised pretraining term.
    pub fn ensure_semi_head(&mut self) -> Result<()> {
        if self.semi_head.is_none() {
            let c = self.config.backbone_out_channels();
            self.semi_head = Some(add_mlp(&mut self.store, self.seed, "pretext.semi", c, self.config.head_hidden, 2)?);
        }
        Ok(())
    }

    pub fn has_semi_head(&self) -> bool {
        self.semi_head.is_some()
    }

    fn embeddings(&self, g: &mut Graph<T>, cond: &Conditioning, subject_ids: &[&str]) -> Result<Var> {
        let table = g.param(&self.store, cond.table);
        let n_seen = self.subject_order.len();
        let mut unseen: Vec<&str> = Vec::new();
        let mut idx = Vec::with_capacity(subject_ids.len());
        for &id in subject_ids {
            match self.subjects.get(id) {
                Some(&i) => idx.push(i),
                None => {
                    let u = unseen.iter().position(|x| *x == id).unwrap_or_else(|| {
                        unseen.push(id);
                        unseen.len() - 1
                    });
                    idx.push(n_seen + u);
                }
            }
        }
        let table = if unseen.is_empty() {
            table
        } else {
            let dim = self.config.conditioning_dim;
            let data = unseen.iter().flat_map(|id| self.unseen_embedding(id).data).collect();
            let extra = g.constant(Tensor::new(vec![unseen.len(), dim], data)?);
            g.concat_rows(table, extra)?
        };
        g.gather(table, &idx)
    }

    /// Backbone on an already stacked input `x [B, S_d, t]`.
    pub fn forward_backbone_input(&self, g: &mut Graph<T>, x: Var, dataset_id: &str, subject_ids: &[&str]) -> Result<Var> {
        let proj = self.projections.get(dataset_id).ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))?;
        let s = self.config.dataset_sensor_counts[dataset_id];
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != s {
            return Err(Error::shape(format!("dataset {dataset_id} expects [B, {s}, t], got {xs:?}")));
        }
        if subject_ids.len() != xs[0] {
            return Err(Error::shape(format!("{} subject ids for a batch of {}", subject_ids.len(), xs[0])));
        }
        let mut h = proj.conv(g, &self.store, x, 1, 0)?;
        for st in &self.stages {
            let a = g.elu(h);
            let a = st.res_a.conv(g, &self.store, a, 1, 1)?;
            let a = g.elu(a);
            let a = st.res_b.conv(g, &self.store, a, 1, 1)?;
            h = g.add(h, a)?;
            let a = g.elu(h);
            h = st.down.conv(g, &self.store, a, st.stride, st.pad)?;
        }
        if let Some(cond) = &self.conditioning {
            let emb = self.embeddings(g, cond, subject_ids)?;
            h = match cond.film {
                Some((gl, bl)) => {
                    let gamma = gl.linear(g, &self.store, emb)?;
                    let beta = bl.linear(g, &self.store, emb)?;
                    g.film(h, gamma, beta)?
                }
                None => {
                    let tau = g.shape(h)[2];
                    let e = g.broadcast_time(emb, tau)?;
                    g.concat_channels(h, e)?
                }
            };
        }
        Ok(h)
    }

    /// Backbone output `[B, C, tau]` for a standardised single-dataset batch.
    pub fn forward_backbone(&self, g: &mut Graph<T>, batch: &[Window]) -> Result<Var> {
        let first = batch.first().ok_or_else(|| Error::Empty("batch".into()))?;
        if batch.iter().any(|w| w.dataset_id != first.dataset_id) {
            return Err(Error::shape("a batch must come from one dataset"));
        }
        let x = g.constant(batch_tensor(batch)?);
        let subjects: Vec<&str> = batch.iter().map(|w| w.subject_id.as_str()).collect();
        self.forward_backbone_input(g, x, &first.dataset_id, &subjects)
    }

    /// Band, phase and amplitude logits `(B, 7)`, `(B, 8)`, `(B, 16)`.
    pub fn forward_pretext(&self, g: &mut Graph<T>, backbone: Var) -> Result<[Var; 3]> {
        let pooled = g.mean_time(backbone)?;
        let z = self.projector.forward(g, &self.store, pooled)?;
        let [a, b, c] = self.pretext_heads;
        Ok([a.linear(g, &self.store, z)?, b.linear(g, &self.store, z)?, c.linear(g, &self.store, z)?])
    }

    fn head(&self, task: DownstreamTask) -> Result<Mlp> {
        self.heads.get(&task).copied().ok_or_else(|| Error::shape(format!("model has no {} head", task.name())))
    }

    /// Per-embedding speech logits `[B, tau, 2]`.
    pub fn forward_speech(&self, g: &mut Graph<T>, backbone: Var) -> Result<Var> {
        let cols = g.swap_last_two(backbone)?;
        self.head(DownstreamTask::Speech)?.forward(g, &self.store, cols)
    }

    /// Whole-window voicing logits `[B, 2]` from the flattened backbone output.
    pub fn forward_voicing(&self, g: &mut Graph<T>, backbone: Var) -> Result<Var> {
        let s = g.shape(backbone).to_vec();
        let flat = g.reshape(backbone, &[s[0], s[1] * s[2]])?;
        self.head(DownstreamTask::Voicing)?.forward(g, &self.store, flat)
    }

    pub fn forward_task(&self, g: &mut Graph<T>, backbone: Var, task: DownstreamTask) -> Result<Var> {
        match task {
            DownstreamTask::Speech => self.forward_speech(g, backbone),
            DownstreamTask::Voicing => self.forward_voicing(g, backbone),
        }
    }

    /// Per-embedding logits `[B, tau, 2]` of the semi-supervised head.
    pub fn forward_semi(&self, g: &mut Graph<T>, backbone: Var) -> Result<Var> {
        let head = self.semi_head.ok_or_else(|| Error::shape("model has no semi-supervised head"))?;
        let cols = g.swap_last_two(backbone)?;
        head.forward(g, &self.store, cols)
    }

    /// Shallow fine-tuning: freeze everything except downstream heads and the
    /// projections named in `trainable_projections`.
    pub fn freeze_for_shallow(&mut self, trainable_projections: &[String]) {
        self.store.set_frozen_where(true, |_| true);
        self.store.set_frozen_where(false, |n| {
            n.starts_with("head.")
                || trainable_projections.iter().any(|ds| n.strip_prefix("projection.").and_then(|r| r.strip_prefix(ds.as_str())).is_some_and(|r| r.starts_with('.')))
        });
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_frozen_where(false, |_| true);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.kv_pairs();
        meta.push(("seed".into(), self.seed.to_string()));
        meta.push(("subjects".into(), self.subject_order.join(",")));
        Checkpoint::from_store(&self.store, meta)
    }

    /// Rebuilds a model from a checkpoint, including its subjects and heads.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: Vec<(String, String)> =
            ck.meta.iter().filter(|(k, _)| k != "seed" && k != "subjects").cloned().collect();
        let config = ModelConfig::from_kv_pairs(&arch)?;
        let seed = ck
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::shape("checkpoint lacks a seed entry"))?;
        let mut model = CortexModel::new(config, seed)?;
        let subjects: Vec<&str> = ck.meta("subjects").unwrap_or("").split(',').filter(|s| !s.is_empty()).collect();
        model.register_subjects(&subjects)?;
        let c = model.config.backbone_out_channels();
        for e in &ck.entries {
            match e.name.as_str() {
                "head.speech.0.weight" => model.ensure_head(DownstreamTask::Speech, 1)?,
                "head.voicing.0.weight" => {
                    let width = e.shape.get(1).copied().unwrap_or(0);
                    if c == 0 || width % c != 0 {
                        return Err(Error::shape(format!("voicing head width {width} is not a multiple of {c}")));
                    }
                    model.ensure_head(DownstreamTask::Voicing, width / c)?
                }
                "pretext.semi.0.weight" => model.ensure_semi_head()?,
                _ => {}
            }
        }
        if model.store.len() != ck.entries.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} entries, architecture has {}",
                ck.entries.len(),
                model.store.len()
            )));
        }
        ck.load_into(&mut model.store, false)?;
        Ok(model)
    }

    /// SHA-256 of the backbone parameters as stored in a checkpoint.
    pub fn backbone_digest(&self) -> String {
        self.to_checkpoint().digest(is_backbone_param)
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> CortexModel<U> {
        CortexModel {
            config: self.config.clone(),
            store: self.store.cast(),
            seed: self.seed,
            projections: self.projections.clone(),
            stages: self.stages.clone(),
            conditioning: self.conditioning.clone(),
            subjects: self.subjects.clone(),
            subject_order: self.subject_order.clone(),
            projector: self.projector,
            pretext_heads: self.pretext_heads,
            heads: self.heads.clone(),
            semi_head: self.semi_head,
        }
    }
}
