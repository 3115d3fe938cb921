//! Model and training configuration, the flat `key = value` file format,
//! and invariant checking.
//!
//! Keys carry their unit where one applies (`window_s`, `lr`). Lists are
//! comma-separated. Everything after `#` on a line is a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{ConfigViolation, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    None,
    /// Subject embedding concatenated to the bottleneck channels.
    Embedding,
    Film,
}

impl ConditioningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Embedding => "embedding",
            ConditioningMode::Film => "film",
        }
    }
}

impl FromStr for ConditioningMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(ConditioningMode::None),
            "embedding" => Ok(ConditioningMode::Embedding),
            "film" => Ok(ConditioningMode::Film),
            other => Err(format!("unknown conditioning mode `{other}`")),
        }
    }
}

/// Floating-point width used for training arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_shared: usize,
    pub d_backbone: usize,
    /// `downsampling_ratios.len() + 1` entries: input width of each stage, then the bottleneck width.
    pub conv_channels: Vec<usize>,
    pub downsampling_ratios: Vec<usize>,
    pub projector_hidden: usize,
    /// Hidden width of the two-layer downstream MLP heads.
    pub head_hidden: usize,
    pub conditioning_mode: ConditioningMode,
    pub conditioning_dim: usize,
    pub dataset_sensor_counts: BTreeMap<String, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_shared: 512,
            d_backbone: 512,
            conv_channels: vec![512, 512, 512, 512],
            downsampling_ratios: vec![5, 5, 1],
            projector_hidden: 512,
            head_hidden: 512,
            conditioning_mode: ConditioningMode::None,
            conditioning_dim: 16,
            dataset_sensor_counts: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    /// A narrow variant of the default architecture for CPU-scale experiments.
    pub fn desk_scale(width: usize) -> Self {
        ModelConfig {
            d_shared: width,
            d_backbone: width,
            conv_channels: vec![width; 4],
            projector_hidden: width,
            head_hidden: width,
            ..ModelConfig::default()
        }
    }

    /// Architecture keys in config-file form, in file order.
    pub fn kv_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("d_shared".to_string(), self.d_shared.to_string()),
            ("d_backbone".to_string(), self.d_backbone.to_string()),
            ("conv_channels".to_string(), join(&self.conv_channels)),
            ("downsampling_ratios".to_string(), join(&self.downsampling_ratios)),
            ("projector_hidden".to_string(), self.projector_hidden.to_string()),
            ("head_hidden".to_string(), self.head_hidden.to_string()),
            ("conditioning".to_string(), self.conditioning_mode.as_str().to_string()),
            ("conditioning_dim".to_string(), self.conditioning_dim.to_string()),
        ];
        for (ds, n) in &self.dataset_sensor_counts {
            v.push((format!("sensors.{ds}"), n.to_string()));
        }
        v
    }

    /// Inverse of [`ModelConfig::kv_pairs`]; unknown keys are rejected.
    pub fn from_kv_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Ok(ExperimentConfig::parse(&text)?.model)
    }

    pub fn downsampling_product(&self) -> usize {
        self.downsampling_ratios.iter().product()
    }

    /// Channel count of the backbone output (bottleneck plus any concatenated embedding).
    pub fn backbone_out_channels(&self) -> usize {
        match self.conditioning_mode {
            ConditioningMode::Embedding => self.d_backbone + self.conditioning_dim,
            _ => self.d_backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_weights: [f64; 3],
    pub rho_phase: f64,
    pub rho_amplitude: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    pub batch_size: usize,
    pub semi_supervised_weight: f64,
    pub window_s: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: [1.0, 1.0, 1.0],
            rho_phase: 0.5,
            rho_amplitude: 0.2,
            learning_rate: 0.000066,
            weight_decay: 0.01,
            pretrain_epochs: 200,
            finetune_epochs: 30,
            split_ratios: [0.8, 0.1, 0.1],
            seed: 0,
            batch_size: 32,
            semi_supervised_weight: 0.0,
            window_s: 0.5,
            precision: Precision::F32,
        }
    }
}

/// Configs that passed [`validate_config`], with the derived embedding count.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window_samples: usize,
    pub tau: usize,
}

pub fn validate_config(
    model: &ModelConfig,
    train: &TrainConfig,
    window_samples: usize,
) -> Result<CheckedConfig> {
    let mut v = Vec::new();
    let mut range = |field: &'static str, value: f64, ok: bool, expected: &'static str| {
        if !ok {
            v.push(ConfigViolation::Range { field, value, expected });
        }
    };

    for (d, name) in [
        (model.d_shared, "d_shared"),
        (model.d_backbone, "d_backbone"),
        (model.projector_hidden, "projector_hidden"),
        (model.head_hidden, "head_hidden"),
        (model.conditioning_dim, "conditioning_dim"),
        (train.batch_size, "batch_size"),
        (train.pretrain_epochs, "pretrain_epochs"),
        (train.finetune_epochs, "finetune_epochs"),
    ] {
        range(name, d as f64, d > 0, "a positive integer");
    }
    range("rho_phase", train.rho_phase, train.rho_phase > 0.0 && train.rho_phase <= 1.0, "(0, 1]");
    range(
        "rho_amplitude",
        train.rho_amplitude,
        train.rho_amplitude > 0.0 && train.rho_amplitude <= 1.0,
        "(0, 1]",
    );
    for (w, name) in train.loss_weights.iter().zip(["w1", "w2", "w3"]) {
        range(name, *w, w.is_finite() && *w >= 0.0, ">= 0");
    }
    range("lr", train.learning_rate, train.learning_rate.is_finite() && train.learning_rate > 0.0, "> 0");
    range("weight_decay", train.weight_decay, train.weight_decay >= 0.0, ">= 0");
    range(
        "semi_supervised_weight",
        train.semi_supervised_weight,
        train.semi_supervised_weight.is_finite() && train.semi_supervised_weight >= 0.0,
        ">= 0",
    );
    range("window_s", train.window_s, train.window_s > 0.0, "> 0");
    let split_sum: f64 = train.split_ratios.iter().sum();
    let splits_ok = train.split_ratios.iter().all(|r| *r >= 0.0) && (split_sum - 1.0).abs() <= 1e-9;
    range("split_ratios", split_sum, splits_ok, "non-negative ratios summing to 1");

    let mut structure = |ok: bool, message: String| {
        if !ok {
            v.push(ConfigViolation::Structure { message });
        }
    };
    structure(!model.downsampling_ratios.is_empty(), "downsampling_ratios must not be empty".into());
    structure(
        model.downsampling_ratios.iter().all(|&r| r >= 1),
        "downsampling ratios must be >= 1".into(),
    );
    structure(
        model.conv_channels.len() == model.downsampling_ratios.len() + 1,
        format!(
            "conv_channels has {} entries, expected downsampling_ratios + 1 = {}",
            model.conv_channels.len(),
            model.downsampling_ratios.len() + 1
        ),
    );
    structure(
        model.conv_channels.first() == Some(&model.d_shared),
        "conv_channels must start at d_shared".into(),
    );
    structure(
        model.conv_channels.last() == Some(&model.d_backbone),
        "conv_channels must end at d_backbone".into(),
    );
    structure(model.conv_channels.iter().all(|&c| c > 0), "conv channels must be positive".into());

    let product = model.downsampling_product().max(1);
    if window_samples == 0 || window_samples % product != 0 {
        v.push(ConfigViolation::Divisibility { window_samples, product });
    }

    if v.is_empty() {
        Ok(CheckedConfig {
            model: model.clone(),
            train: train.clone(),
            window_samples,
            tau: window_samples / product,
        })
    } else {
        Err(Error::InvalidConfig(v))
    }
}

/// A parsed `key = value` file that remembers line numbers and which keys were read.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(Error::ConfigParse { line, message: format!("expected `key = value`, got `{content}`") });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::ConfigParse { line, message: "empty key".into() });
            }
            if entries.insert(key.clone(), (v.trim().to_string(), line)).is_some() {
                return Err(Error::ConfigParse { line, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(KvFile { entries, used: Default::default() })
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(e.0.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::ConfigParse {
                line: self.line_of(key),
                message: format!("{key}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|p| {
                let p = p.trim();
                p.parse::<T>().map_err(|e| Error::ConfigParse {
                    line: self.line_of(key),
                    message: format!("{key}: cannot parse list item `{p}`: {e}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Keys with the given prefix, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries.keys().filter_map(|k| k.strip_prefix(prefix).map(str::to_string)).collect()
    }

    /// Errors on the first key that no getter consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().filter(|(k, _)| !used.contains(*k)).min_by_key(|(_, (_, l))| *l) {
            Some((k, (_, line))) => Err(Error::ConfigParse { line: *line, message: format!("unknown key `{k}`") }),
            None => Ok(()),
        }
    }
}

fn fixed3(kv: &KvFile, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    match kv.get_list::<f64>(key)? {
        None => Ok(default),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(v) => Err(Error::ConfigParse {
            line: kv.line_of(key),
            message: format!("{key}: expected 3 values, got {}", v.len()),
        }),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Model plus training configuration, as stored in one experiment file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let md = ModelConfig::default();
        let td = TrainConfig::default();
        let mut sensors = BTreeMap::new();
        for ds in kv.with_prefix("sensors.") {
            let key = format!("sensors.{ds}");
            sensors.insert(ds, kv.get::<usize>(&key)?.unwrap_or(0));
        }
        let model = ModelConfig {
            d_shared: kv.get_or("d_shared", md.d_shared)?,
            d_backbone: kv.get_or("d_backbone", md.d_backbone)?,
            conv_channels: kv.get_list("conv_channels")?.unwrap_or(md.conv_channels),
            downsampling_ratios: kv.get_list("downsampling_ratios")?.unwrap_or(md.downsampling_ratios),
            projector_hidden: kv.get_or("projector_hidden", md.projector_hidden)?,
            head_hidden: kv.get_or("head_hidden", md.head_hidden)?,
            conditioning_mode: kv.get_or("conditioning", md.conditioning_mode)?,
            conditioning_dim: kv.get_or("conditioning_dim", md.conditioning_dim)?,
            dataset_sensor_counts: sensors,
        };
        let train = TrainConfig {
            loss_weights: fixed3(kv, "loss_weights", td.loss_weights)?,
            rho_phase: kv.get_or("rho_phase", td.rho_phase)?,
            rho_amplitude: kv.get_or("rho_amplitude", td.rho_amplitude)?,
            learning_rate: kv.get_or("lr", td.learning_rate)?,
            weight_decay: kv.get_or("weight_decay", td.weight_decay)?,
            pretrain_epochs: kv.get_or("pretrain_epochs", td.pretrain_epochs)?,
            finetune_epochs: kv.get_or("finetune_epochs", td.finetune_epochs)?,
            split_ratios: [
                kv.get_or("train_ratio", td.split_ratios[0])?,
                kv.get_or("val_ratio", td.split_ratios[1])?,
                kv.get_or("test_ratio", td.split_ratios[2])?,
            ],
            seed: kv.get_or("seed", td.seed)?,
            batch_size: kv.get_or("batch_size", td.batch_size)?,
            semi_supervised_weight: kv.get_or("semi_supervised_weight", td.semi_supervised_weight)?,
            window_s: kv.get_or("window_s", td.window_s)?,
            precision: kv.get_or("precision", td.precision)?,
        };
        kv.finish()?;
        Ok(ExperimentConfig { model, train })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        // `{:?}` on floats prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "window_s = {:?}", t.window_s);
        let _ = writeln!(s, "rho_phase = {:?}", t.rho_phase);
        let _ = writeln!(s, "rho_amplitude = {:?}", t.rho_amplitude);
        let _ = writeln!(s, "loss_weights = {}", t.loss_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(", "));
        for (k, v) in m.kv_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "pretrain_epochs = {}", t.pretrain_epochs);
        let _ = writeln!(s, "finetune_epochs = {}", t.finetune_epochs);
        let _ = writeln!(s, "lr = {:?}", t.learning_rate);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "train_ratio = {:?}", t.split_ratios[0]);
        let _ = writeln!(s, "val_ratio = {:?}", t.split_ratios[1]);
        let _ = writeln!(s, "test_ratio = {:?}", t.split_ratios[2]);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "semi_supervised_weight = {:?}", t.semi_supervised_weight);
        let _ = writeln!(s, "precision = {}", t.precision.as_str());
        s
    }

    pub fn window_samples(&self, sample_rate_hz: f64) -> usize {
        (self.train.window_s * sample_rate_hz).round() as usize
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<CheckedConfig> {
        validate_config(&self.model, &self.train, self.window_samples(sample_rate_hz))
    }
}
