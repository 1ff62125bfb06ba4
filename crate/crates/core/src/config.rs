//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Every value error names its key.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    load_cifar_bin, load_idx, synth_generate, Augment, Dataset, Normalization, SynthSpec, CIFAR_NORM, SYNTH_NORM,
};
use crate::error::{Error, Result};
use crate::model::{SsflNetConfig, StageConfig};
use crate::scalar::DType;
use crate::train::{InferMode, Method, TrainOptions};

/// Where a dataset comes from.
///
/// Text forms: `synth[:key=value,...]` with keys `per_class`, `sigma`,
/// `seed`, `jitter`, `classes`, `size`, `distractor`; `cifar:PATH[+PATH...]`;
/// `idx:IMAGES+LABELS`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synth(SynthSpec),
    Cifar(Vec<PathBuf>),
    Idx { images: PathBuf, labels: PathBuf },
}

impl DataSpec {
    /// Default normalization for the source.
    pub fn normalization(&self) -> Normalization {
        match self {
            DataSpec::Synth(s) => Normalization::uniform(s.channels, SYNTH_NORM.0, SYNTH_NORM.1),
            DataSpec::Cifar(_) => Normalization {
                mean: CIFAR_NORM.0.to_vec(),
                std: CIFAR_NORM.1.to_vec(),
            },
            DataSpec::Idx { .. } => Normalization::uniform(1, 0.5, 0.5),
        }
    }

    /// Loads the raw `[0, 1]` dataset.
    pub fn load_raw(&self) -> Result<Dataset> {
        match self {
            DataSpec::Synth(s) => synth_generate(s),
            DataSpec::Cifar(paths) => load_cifar_bin(paths, None),
            DataSpec::Idx { images, labels } => load_idx(images, labels),
        }
    }

    /// Loads, subsets to the first `per_class` samples of every class when
    /// nonzero, and normalizes when asked.
    pub fn load(&self, per_class: usize, normalize: bool) -> Result<Dataset> {
        let mut ds = self.load_raw()?;
        if per_class > 0 {
            ds = ds.first_k_per_class(per_class);
        }
        if normalize {
            ds.normalize(&self.normalization())?;
        }
        Ok(ds)
    }
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synth" => {
                let mut spec = SynthSpec::default();
                for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
                    let (k, v) = item
                        .split_once('=')
                        .ok_or_else(|| Error::config("data", format!("expected key=value in `{item}`")))?;
                    let field = format!("data.{}", k.trim());
                    match k.trim() {
                        "per_class" => spec.samples_per_class = parse_value(&field, v)?,
                        "sigma" => spec.noise_sigma = parse_value(&field, v)?,
                        "seed" => spec.seed = parse_value(&field, v)?,
                        "jitter" => spec.jitter = parse_value(&field, v)?,
                        "classes" => spec.num_classes = parse_value(&field, v)?,
                        "size" => spec.size = parse_value(&field, v)?,
                        "distractor" => spec.distractor = parse_value(&field, v)?,
                        _ => return Err(Error::config(field, "unknown synthetic option")),
                    }
                }
                spec.validate()?;
                Ok(DataSpec::Synth(spec))
            }
            "cifar" => {
                let paths: Vec<PathBuf> = rest.split('+').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
                if paths.is_empty() {
                    return Err(Error::config("data", "cifar needs at least one path"));
                }
                Ok(DataSpec::Cifar(paths))
            }
            "idx" => match rest.split_once('+') {
                Some((i, l)) if !i.is_empty() && !l.is_empty() => Ok(DataSpec::Idx {
                    images: i.into(),
                    labels: l.into(),
                }),
                _ => Err(Error::config("data", "idx needs IMAGES+LABELS")),
            },
            other => Err(Error::config("data", format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Synth(s) => write!(
                f,
                "synth:per_class={},sigma={},seed={},jitter={},classes={},size={},distractor={}",
                s.samples_per_class, s.noise_sigma, s.seed, s.jitter, s.num_classes, s.size, s.distractor
            ),
            DataSpec::Cifar(paths) => {
                let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                write!(f, "cifar:{}", joined.join("+"))
            }
            DataSpec::Idx { images, labels } => write!(f, "idx:{}+{}", images.display(), labels.display()),
        }
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub train_data: DataSpec,
    pub test_data: Option<DataSpec>,
    pub per_class: usize,
    pub normalize: bool,
    pub model: SsflNetConfig,
    pub train: TrainOptions,
    pub dtype: DType,
    pub out_dir: PathBuf,
    pub modes: Vec<InferMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_data: DataSpec::Synth(SynthSpec::default()),
            test_data: Some(DataSpec::Synth(SynthSpec {
                samples_per_class: 125,
                seed: 1,
                ..SynthSpec::default()
            })),
            per_class: 0,
            normalize: true,
            model: SsflNetConfig {
                num_classes: 4,
                ..SsflNetConfig::default()
            },
            train: TrainOptions::default(),
            dtype: DType::F64,
            out_dir: PathBuf::from("runs/default"),
            modes: vec![InferMode::Si, InferMode::Ag],
        }
    }
}

fn parse_value<V: FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e: V::Err| Error::config(key, format!("cannot parse `{}`: {e}", v.trim())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(key, format!("expected a boolean, got `{other}`"))),
    }
}

fn parse_list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>>
where
    V::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// `WIDTHxBLOCKS` items, comma-separated.
fn parse_stages(key: &str, v: &str) -> Result<Vec<StageConfig>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (w, b) = item
                .split_once('x')
                .ok_or_else(|| Error::config(key, format!("expected WIDTHxBLOCKS, got `{item}`")))?;
            Ok(StageConfig {
                width: parse_value(key, w)?,
                blocks: parse_value(key, b)?,
            })
        })
        .collect()
}

fn join<V: fmt::Display>(items: &[V]) -> String {
    items.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Parses config text on top of the defaults and validates the result.
    /// CIFAR training data defaults to `crop_flip` augmentation and baseline
    /// runs default to `modes = si`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut augment_given = false;
        let mut modes_given = false;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "expected key = value"))?;
            augment_given |= k.trim() == "augment";
            modes_given |= k.trim() == "modes";
            cfg.set(k.trim(), v.trim())?;
        }
        if !augment_given && matches!(cfg.train_data, DataSpec::Cifar(_)) {
            cfg.train.augment = Augment::CropFlip;
        }
        if !modes_given && cfg.train.method == Method::Baseline {
            cfg.modes = vec![InferMode::Si];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "train_data" => self.train_data = v.parse()?,
            "test_data" => {
                self.test_data = match v.trim() {
                    "" | "none" => None,
                    s => Some(s.parse()?),
                }
            }
            "per_class" => self.per_class = parse_value(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "in_channels" => self.model.in_channels = parse_value(key, v)?,
            "in_size" => self.model.in_size = parse_value(key, v)?,
            "num_classes" => self.model.num_classes = parse_value(key, v)?,
            "stem_stride" => self.model.stem_stride = parse_value(key, v)?,
            "stages" => self.model.stages = parse_stages(key, v)?,
            "t" => self.model.t = parse_value(key, v)?,
            "method" => t.method = parse_value(key, v)?,
            "beta" => t.beta = parse_value(key, v)?,
            "sd" => t.sd = parse_bool(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "lr" => t.sgd.lr = parse_value(key, v)?,
            "momentum" => t.sgd.momentum = parse_value(key, v)?,
            "weight_decay" => t.sgd.weight_decay = parse_value(key, v)?,
            "milestones" => t.sgd.milestones = parse_list(key, v)?,
            "decay_factor" => t.sgd.decay_factor = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "augment" => t.augment = parse_value(key, v)?,
            "combine" => t.combine = parse_value(key, v)?,
            "eval_every" => t.eval_every = parse_value(key, v)?,
            "dtype" => {
                self.dtype = match v.trim() {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => return Err(Error::config(key, format!("expected f32|f64, got `{other}`"))),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v.trim()),
            "modes" => self.modes = parse_list(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.modes.is_empty() {
            return Err(Error::config("modes", "at least one inference mode is required"));
        }
        if self.modes.contains(&InferMode::Sd) && !self.train.sd {
            return Err(Error::config("modes", "mode sd requires sd = true"));
        }
        if self.train.method == Method::Baseline && self.modes.iter().any(|m| *m != InferMode::Si) {
            return Err(Error::config("modes", "baseline runs report si only"));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let stages: Vec<String> = m.stages.iter().map(|s| format!("{}x{}", s.width, s.blocks)).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("train_data", self.train_data.to_string());
        kv(
            "test_data",
            self.test_data.as_ref().map_or_else(|| "none".to_string(), ToString::to_string),
        );
        kv("per_class", self.per_class.to_string());
        kv("normalize", self.normalize.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("in_size", m.in_size.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("stem_stride", m.stem_stride.to_string());
        kv("stages", stages.join(","));
        kv("t", m.t.to_string());
        kv("method", t.method.to_string());
        kv("beta", format!("{:?}", t.beta));
        kv("sd", t.sd.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:?}", t.sgd.lr));
        kv("momentum", format!("{:?}", t.sgd.momentum));
        kv("weight_decay", format!("{:?}", t.sgd.weight_decay));
        kv("milestones", join(&t.sgd.milestones));
        kv("decay_factor", format!("{:?}", t.sgd.decay_factor));
        kv("seed", t.seed.to_string());
        kv("augment", t.augment.to_string());
        kv("combine", t.combine.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("dtype", self.dtype.name().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("modes", join(&self.modes));
        out
    }

    /// Loads the train and (optional) test datasets.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let train = self.train_data.load(self.per_class, self.normalize)?;
        let test = match &self.test_data {
            Some(spec) => Some(spec.load(self.per_class, self.normalize)?),
            None => None,
        };
        Ok((train, test))
    }
}
