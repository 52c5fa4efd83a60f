//! Run configuration and its flat key-value text format.
//!
//! Documents are TOML restricted to strings, numbers, booleans and arrays of
//! numbers. Tables are flattened to dotted keys, so `[augment] flip_p = 0.5`
//! and `augment.flip_p = 0.5` are the same setting. Unknown keys are errors.

use std::path::PathBuf;

use toml::Value;

use crate::augment::AugmentPolicy;
use crate::data::{
    load_cifar_dir, load_mnist_dir, make_one_class_task, synth_generate, CifarVariant, OneClassTask, SynthSpec,
};
use crate::error::{CoreError, Result};
use crate::estimators::{EntropyConfig, Estimator, SimilarityConfig, DEFAULT_C2};
use crate::evaluate::ScoreKind;
use crate::models::{EncoderConfig, Variant};

/// Grid swept by `sweep-beta` unless configured otherwise.
pub const DEFAULT_BETA_GRID: [f64; 9] = [0.0, 0.5, 1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: i64) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// MNIST-layout IDX directory (MNIST, Fashion-MNIST).
    Idx,
    Cifar10,
    Cifar100,
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Name as written in the config: `mnist`, `fashion`, `cifar10`,
    /// `cifar100`, `gauss-clusters` or `blobs-images`.
    pub name: String,
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    /// Pad images symmetrically with `-1` to this size (0 = no padding).
    pub pad: usize,
    /// Repeat single-channel images into three channels.
    pub expand_gray: bool,
    /// Seed of the synthetic generators, independent of the training seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Overrides of the variant's table values; `None` keeps the default.
    pub ndf: Option<usize>,
    pub nrkhs: Option<usize>,
    pub ndepth: Option<usize>,
    pub projection: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub normal_class: usize,
    pub beta: f64,
    pub p_norm: u8,
    pub entropy_squared: bool,
    pub estimator: Estimator,
    pub model: ModelConfig,
    pub extension: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub c2: f64,
    pub eval_every: usize,
    pub precision: Precision,
    pub augment: AugmentPolicy,
    /// Score used by the `eval` subcommand.
    pub score: ScoreKind,
    /// Monte-Carlo pair count for [`ScoreKind::Mc`].
    pub mc_h: usize,
    pub betas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                name: "gauss-clusters".into(),
                source: DataSource::Synth(SynthSpec::gauss_clusters()),
                dir: None,
                pad: 0,
                expand_gray: false,
                seed: 0,
            },
            normal_class: 0,
            beta: 20.0,
            p_norm: 1,
            entropy_squared: false,
            estimator: Estimator::Nce,
            model: ModelConfig {
                variant: Variant::Tiny,
                ndf: None,
                nrkhs: None,
                ndepth: None,
                projection: None,
            },
            extension: false,
            epochs: 400,
            batch_size: 64,
            lr: 2e-4,
            seed: 0,
            c2: DEFAULT_C2,
            eval_every: 5,
            precision: Precision::F32,
            augment: AugmentPolicy::default(),
            score: ScoreKind::Ori,
            mc_h: 100,
            betas: DEFAULT_BETA_GRID.to_vec(),
        }
    }
}

fn cfg_err(key: &str, detail: impl Into<String>) -> CoreError {
    CoreError::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(cfg_err(key, format!("expected a number, got {v}"))),
    }
}

fn as_int(key: &str, v: &Value) -> Result<i64> {
    match v {
        Value::Integer(i) => Ok(*i),
        _ => Err(cfg_err(key, format!("expected an integer, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    let i = as_int(key, v)?;
    usize::try_from(i).map_err(|_| cfg_err(key, format!("expected a non-negative integer, got {i}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    let i = as_int(key, v)?;
    u64::try_from(i).map_err(|_| cfg_err(key, format!("expected a non-negative integer, got {i}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| cfg_err(key, format!("expected a boolean, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| cfg_err(key, format!("expected a string, got {v}")))
}

fn as_prob(key: &str, v: &Value) -> Result<f64> {
    let p = as_f64(key, v)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(cfg_err(key, format!("{p} is not in [0, 1]")));
    }
    Ok(p)
}

fn as_nonneg(key: &str, v: &Value) -> Result<f64> {
    let x = as_f64(key, v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(cfg_err(key, format!("{x} must be finite and >= 0")));
    }
    Ok(x)
}

impl RunConfig {
    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| cfg_err("<document>", e.message().to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut cfg = RunConfig::default();
        // The generator must be known before its parameters are applied.
        if let Some((k, v)) = pairs.iter().find(|(k, _)| k == "dataset") {
            cfg.set_dataset(as_str(k, v)?)?;
        }
        let mut squared = None;
        for (k, v) in &pairs {
            if k == "entropy_squared" {
                squared = Some(as_bool(k, v)?);
            } else {
                cfg.set(k, v)?;
            }
        }
        cfg.entropy_squared = squared.unwrap_or(cfg.p_norm == 2);
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_dataset(&mut self, name: &str) -> Result<()> {
        let source = match name {
            "mnist" | "fashion" => DataSource::Idx,
            "cifar10" => DataSource::Cifar10,
            "cifar100" => DataSource::Cifar100,
            other => DataSource::Synth(
                SynthSpec::by_name(other).map_err(|_| cfg_err("dataset", format!("unknown dataset `{other}`")))?,
            ),
        };
        self.data.name = name.to_string();
        self.data.source = source;
        Ok(())
    }

    fn set_synth(&mut self, key: &str, v: &Value) -> Result<()> {
        let field = &key["data.".len()..];
        let DataSource::Synth(spec) = &mut self.data.source else {
            return Err(cfg_err(key, format!("only applies to synthetic datasets, not {}", self.data.name)));
        };
        let mismatch = || cfg_err(key, format!("not a parameter of {}", self.data.name));
        match spec {
            SynthSpec::GaussClusters {
                dim,
                clusters,
                sigma,
                separation,
                radius,
                train_per_class,
                test_normal,
                test_per_anomaly,
            } => match field {
                "dim" => *dim = as_usize(key, v)?,
                "clusters" => *clusters = as_usize(key, v)?,
                "sigma" => *sigma = as_nonneg(key, v)?,
                "separation" => *separation = as_nonneg(key, v)?,
                "radius" => *radius = as_nonneg(key, v)?,
                "train_per_class" => *train_per_class = as_usize(key, v)?,
                "test_normal" => *test_normal = as_usize(key, v)?,
                "test_per_anomaly" => *test_per_anomaly = as_usize(key, v)?,
                _ => return Err(mismatch()),
            },
            SynthSpec::BlobsImages {
                size,
                train_per_class,
                test_per_class,
            } => match field {
                "size" => *size = as_usize(key, v)?,
                "train_per_class" => *train_per_class = as_usize(key, v)?,
                "test_per_class" => *test_per_class = as_usize(key, v)?,
                _ => return Err(mismatch()),
            },
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let a = &mut self.augment;
        match key {
            "dataset" => {}
            "data.dir" => self.data.dir = Some(PathBuf::from(as_str(key, v)?)),
            "data.pad" => self.data.pad = as_usize(key, v)?,
            "data.expand_gray" => self.data.expand_gray = as_bool(key, v)?,
            "data.seed" => self.data.seed = as_u64(key, v)?,
            "data.dim" | "data.clusters" | "data.sigma" | "data.separation" | "data.radius"
            | "data.train_per_class" | "data.test_normal" | "data.test_per_anomaly" | "data.size"
            | "data.test_per_class" => self.set_synth(key, v)?,
            "normal_class" => self.normal_class = as_usize(key, v)?,
            "beta" => self.beta = as_nonneg(key, v)?,
            "p_norm" => {
                self.p_norm = match as_int(key, v)? {
                    1 => 1,
                    2 => 2,
                    p => return Err(cfg_err(key, format!("must be 1 or 2, got {p}"))),
                }
            }
            "estimator" => {
                let s = as_str(key, v)?;
                self.estimator = Estimator::parse(s).ok_or_else(|| cfg_err(key, format!("unknown estimator `{s}`")))?;
            }
            "extension" => self.extension = as_bool(key, v)?,
            "model.variant" => {
                let s = as_str(key, v)?;
                self.model.variant = Variant::parse(s).ok_or_else(|| cfg_err(key, format!("unknown variant `{s}`")))?;
            }
            "model.ndf" => self.model.ndf = Some(as_usize(key, v)?),
            "model.nrkhs" => self.model.nrkhs = Some(as_usize(key, v)?),
            "model.ndepth" => self.model.ndepth = Some(as_usize(key, v)?),
            "model.projection" => self.model.projection = Some(as_bool(key, v)?),
            "epochs" => self.epochs = as_usize(key, v)?,
            "batch_size" => self.batch_size = as_usize(key, v)?,
            "lr" => self.lr = as_nonneg(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "c2" => self.c2 = as_nonneg(key, v)?,
            "eval_every" => self.eval_every = as_usize(key, v)?,
            "precision" => {
                let b = as_int(key, v)?;
                self.precision = Precision::from_bits(b).ok_or_else(|| cfg_err(key, format!("must be 32 or 64, got {b}")))?;
            }
            "eval.score" => {
                let s = as_str(key, v)?;
                self.score = ScoreKind::parse(s).ok_or_else(|| cfg_err(key, format!("unknown score `{s}`")))?;
            }
            "eval.mc_h" => self.mc_h = as_usize(key, v)?,
            "sweep.betas" => {
                let arr = v.as_array().ok_or_else(|| cfg_err(key, "expected an array of numbers"))?;
                self.betas = arr.iter().map(|b| as_nonneg(key, b)).collect::<Result<_>>()?;
            }
            "augment.crop_scale_min" => a.crop_scale.0 = as_prob(key, v)?,
            "augment.crop_scale_max" => a.crop_scale.1 = as_prob(key, v)?,
            "augment.crop_ratio_min" => a.crop_ratio.0 = as_nonneg(key, v)?,
            "augment.crop_ratio_max" => a.crop_ratio.1 = as_nonneg(key, v)?,
            "augment.flip_p" => a.flip_p = as_prob(key, v)?,
            "augment.jitter_p" => a.jitter_p = as_prob(key, v)?,
            "augment.brightness" => a.brightness = as_nonneg(key, v)?,
            "augment.contrast" => a.contrast = as_nonneg(key, v)?,
            "augment.saturation" => a.saturation = as_nonneg(key, v)?,
            "augment.hue" => a.hue = as_nonneg(key, v)?,
            "augment.gray_p" => a.gray_p = as_prob(key, v)?,
            "augment.noise" => a.noise = as_nonneg(key, v)?,
            "augment.dropout" => a.dropout = as_prob(key, v)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(cfg_err("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        if self.eval_every == 0 {
            return Err(cfg_err("eval_every", "must be >= 1"));
        }
        if self.mc_h == 0 {
            return Err(cfg_err("eval.mc_h", "must be >= 1"));
        }
        if !(self.c2 > 0.0) {
            return Err(cfg_err("c2", "must be > 0"));
        }
        if !(self.lr > 0.0) {
            return Err(cfg_err("lr", "must be > 0"));
        }
        self.augment
            .validate()
            .map_err(|e| cfg_err("augment", e.to_string()))?;
        if matches!(self.data.source, DataSource::Idx | DataSource::Cifar10 | DataSource::Cifar100)
            && self.data.dir.is_none()
        {
            return Err(cfg_err("data.dir", format!("required for dataset {}", self.data.name)));
        }
        Ok(())
    }

    /// Loads or generates the data and builds the one-class task.
    pub fn load_task(&self) -> Result<OneClassTask> {
        let (mut train, mut test) = match &self.data.source {
            DataSource::Synth(spec) => synth_generate(spec, self.data.seed)?,
            other => {
                let dir = self
                    .data
                    .dir
                    .as_deref()
                    .ok_or_else(|| cfg_err("data.dir", "required for file datasets"))?;
                match other {
                    DataSource::Idx => load_mnist_dir(dir)?,
                    DataSource::Cifar10 => load_cifar_dir(dir, CifarVariant::C10)?,
                    _ => load_cifar_dir(dir, CifarVariant::C100Coarse)?,
                }
            }
        };
        if self.data.pad > 0 {
            train = train.pad_to(self.data.pad)?;
            test = test.pad_to(self.data.pad)?;
        }
        if self.data.expand_gray {
            train = train.expand_grayscale()?;
            test = test.expand_grayscale()?;
        }
        make_one_class_task(&train, &test, self.normal_class)
    }

    pub fn entropy(&self) -> EntropyConfig {
        EntropyConfig {
            p: self.p_norm,
            squared: self.entropy_squared,
        }
    }

    pub fn similarity(&self, latent_dim: usize) -> SimilarityConfig {
        SimilarityConfig {
            c1: latent_dim as f64,
            c2: self.c2,
        }
    }

    /// Encoder for inputs of shape `input`.
    pub fn encoder_config(&self, input: [usize; 3]) -> EncoderConfig {
        let mut e = match self.model.variant {
            Variant::Tiny => EncoderConfig::tiny(input.iter().product()),
            Variant::Small => EncoderConfig::small(input),
            Variant::Big => EncoderConfig::big(input),
        };
        if self.model.variant != Variant::Tiny {
            e.ndf = self.model.ndf.unwrap_or(e.ndf);
            e.nrkhs = self.model.nrkhs.unwrap_or(e.nrkhs);
            e.ndepth = self.model.ndepth.unwrap_or(e.ndepth);
        }
        e.projection = self.model.projection.unwrap_or(e.projection);
        e
    }

    /// Canonical document listing every setting; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("dataset = {}", Value::from(self.data.name.clone()))];
        if let Some(dir) = &self.data.dir {
            lines.push(format!("data.dir = {}", Value::from(dir.to_string_lossy().into_owned())));
        }
        lines.push(format!("data.pad = {}", self.data.pad));
        lines.push(format!("data.expand_gray = {}", self.data.expand_gray));
        lines.push(format!("data.seed = {}", self.data.seed));
        if let DataSource::Synth(spec) = &self.data.source {
            match spec {
                SynthSpec::GaussClusters {
                    dim,
                    clusters,
                    sigma,
                    separation,
                    radius,
                    train_per_class,
                    test_normal,
                    test_per_anomaly,
                } => {
                    lines.push(format!("data.dim = {dim}"));
                    lines.push(format!("data.clusters = {clusters}"));
                    lines.push(format!("data.sigma = {}", Value::from(*sigma)));
                    lines.push(format!("data.separation = {}", Value::from(*separation)));
                    lines.push(format!("data.radius = {}", Value::from(*radius)));
                    lines.push(format!("data.train_per_class = {train_per_class}"));
                    lines.push(format!("data.test_normal = {test_normal}"));
                    lines.push(format!("data.test_per_anomaly = {test_per_anomaly}"));
                }
                SynthSpec::BlobsImages {
                    size,
                    train_per_class,
                    test_per_class,
                } => {
                    lines.push(format!("data.size = {size}"));
                    lines.push(format!("data.train_per_class = {train_per_class}"));
                    lines.push(format!("data.test_per_class = {test_per_class}"));
                }
            }
        }
        let f = |x: f64| Value::from(x).to_string();
        lines.push(format!("normal_class = {}", self.normal_class));
        lines.push(format!("beta = {}", f(self.beta)));
        lines.push(format!("p_norm = {}", self.p_norm));
        lines.push(format!("entropy_squared = {}", self.entropy_squared));
        lines.push(format!("estimator = \"{}\"", self.estimator.name()));
        lines.push(format!("extension = {}", self.extension));
        lines.push(format!("model.variant = \"{}\"", self.model.variant.name()));
        if let Some(v) = self.model.ndf {
            lines.push(format!("model.ndf = {v}"));
        }
        if let Some(v) = self.model.nrkhs {
            lines.push(format!("model.nrkhs = {v}"));
        }
        if let Some(v) = self.model.ndepth {
            lines.push(format!("model.ndepth = {v}"));
        }
        if let Some(v) = self.model.projection {
            lines.push(format!("model.projection = {v}"));
        }
        lines.push(format!("epochs = {}", self.epochs));
        lines.push(format!("batch_size = {}", self.batch_size));
        lines.push(format!("lr = {}", f(self.lr)));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("c2 = {}", f(self.c2)));
        lines.push(format!("eval_every = {}", self.eval_every));
        lines.push(format!("precision = {}", self.precision.bits()));
        lines.push(format!("eval.score = \"{}\"", self.score.name()));
        lines.push(format!("eval.mc_h = {}", self.mc_h));
        let betas: Vec<String> = self.betas.iter().map(|&b| f(b)).collect();
        lines.push(format!("sweep.betas = [{}]", betas.join(", ")));
        let a = &self.augment;
        for (k, x) in [
            ("crop_scale_min", a.crop_scale.0),
            ("crop_scale_max", a.crop_scale.1),
            ("crop_ratio_min", a.crop_ratio.0),
            ("crop_ratio_max", a.crop_ratio.1),
            ("flip_p", a.flip_p),
            ("jitter_p", a.jitter_p),
            ("brightness", a.brightness),
            ("contrast", a.contrast),
            ("saturation", a.saturation),
            ("hue", a.hue),
            ("gray_p", a.gray_p),
            ("noise", a.noise),
            ("dropout", a.dropout),
        ] {
            lines.push(format!("augment.{k} = {}", f(x)));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
