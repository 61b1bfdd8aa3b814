//! Plain-text `namespace.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::AttentionMode;
use crate::data::{DatasetSpec, MiniScenesSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::networks::{Arch, AttnPlacement, NetworkConfig};

/// Every recognised key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.kind", "ring2d", "ring2d | grid2d | mini_scenes | image_folder"),
    ("data.modes", "8", "ring2d mode count"),
    ("data.radius", "2.0", "ring2d radius"),
    ("data.sigma", "0.02", "point-mixture standard deviation"),
    ("data.grid_size", "5", "grid2d modes per side"),
    ("data.spacing", "1.0", "grid2d mode spacing"),
    ("data.image_size", "32", "image side length"),
    ("data.min_objects", "1", "mini_scenes minimum object count"),
    ("data.max_objects", "3", "mini_scenes maximum object count"),
    ("data.shadow_dx", "2", "mini_scenes shadow offset, x"),
    ("data.shadow_dy", "2", "mini_scenes shadow offset, y"),
    ("data.path", "", "image_folder directory"),
    (
        "data.samples",
        "0",
        "fixed training-set size (0: fresh samples every batch)",
    ),
    (
        "net.arch",
        "auto",
        "conv | mlp | auto (mlp for points, conv for images)",
    ),
    ("net.latent_dim", "64", "latent dimension"),
    ("net.base_channels", "8", "channels at full resolution"),
    ("net.max_channels", "64", "channel cap"),
    ("net.feature_dim", "64", "discriminator last-layer width"),
    ("net.mlp_hidden", "128", "MLP hidden width"),
    ("net.mlp_layers", "3", "MLP hidden layers"),
    ("net.g.attn.mode", "none", "none | self | softmax"),
    ("net.g.attn.resolution", "16", "generator attention resolution"),
    ("net.g.attn.patch_size", "7", "generator attention patch size"),
    ("net.g.attn.heads", "0", "generator attention heads (0: automatic)"),
    (
        "net.d.attn.mode",
        "none",
        "none | self | softmax | ref_kq | ref_qv | ref_q",
    ),
    ("net.d.attn.resolution", "16", "discriminator self-attention resolution"),
    ("net.d.attn.patch_size", "3", "discriminator attention patch size"),
    ("net.d.attn.heads", "0", "discriminator attention heads (0: automatic)"),
    (
        "net.ref_fusion_resolution",
        "4",
        "resolution where Siamese branches fuse",
    ),
    (
        "loss.kind",
        "dual_contrastive",
        "non_saturating | saturating | wasserstein | hinge | dual_contrastive",
    ),
    ("loss.r1_gamma", "10.0", "R1 weight (0 disables)"),
    ("loss.r1_interval", "16", "apply R1 every this many discriminator steps"),
    ("train.steps", "1000", "training iterations"),
    ("train.batch_size", "64", "batch size"),
    (
        "train.warmup_steps",
        "auto",
        "non-saturating warm-up iterations (auto: 10% of steps)",
    ),
    ("train.d_steps_per_g", "1", "discriminator updates per generator update"),
    ("train.lr", "0.002", "Adam learning rate"),
    ("train.beta1", "0.0", "Adam beta1"),
    ("train.beta2", "0.99", "Adam beta2"),
    ("train.seed", "0", "seed for all randomness"),
    ("train.log_interval", "100", "iterations between log records"),
    (
        "train.checkpoint_interval",
        "0",
        "iterations between checkpoints (0: final only)",
    ),
    (
        "train.g_ema_half_life",
        "0",
        "half-life in iterations of the generator weight average used for sampling (0: off)",
    ),
    (
        "eval.metrics",
        "auto",
        "comma list of ffd, fddf, mode_coverage (auto: by data kind)",
    ),
    ("eval.samples", "2048", "samples per side"),
    (
        "eval.interval",
        "0",
        "iterations between in-training evaluations (0: never)",
    ),
    ("eval.seed", "0", "evaluation sampling seed"),
    ("eval.radius", "auto", "mode_coverage radius (auto: 3·sigma)"),
    ("eval.extractor_seed", "0", "ffd extractor seed"),
    ("output.dir", "runs/default", "run directory"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ffd,
    Fddf,
    ModeCoverage,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ffd => "ffd",
            Metric::Fddf => "fddf",
            Metric::ModeCoverage => "mode_coverage",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffd" => Ok(Metric::Ffd),
            "fddf" => Ok(Metric::Fddf),
            "mode_coverage" => Ok(Metric::ModeCoverage),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (expected ffd, fddf or mode_coverage)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub r1_gamma: f64,
    pub r1_interval: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub d_steps_per_g: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub g_ema_half_life: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub samples: usize,
    pub interval: u64,
    pub seed: u64,
    pub radius: f64,
    pub extractor_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    /// Size of the fixed training set; 0 draws fresh samples every batch.
    pub data_samples: usize,
    pub net: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    values: BTreeMap<String, String>,
}

fn key_index(key: &str) -> Option<usize> {
    KEYS.iter().position(|(k, _, _)| *k == key)
}

fn unknown_key(key: &str) -> Error {
    let valid: Vec<&str> = KEYS.iter().map(|(k, _, _)| *k).collect();
    Error::Config(format!("unknown key {key:?}; valid keys: {}", valid.join(", ")))
}

/// Splits config text into `(key, value)` pairs. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a value")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.str(key);
        v.parse().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
    }

    fn auto<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.str(key) == "auto" {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn attn(&self, who: &str) -> Result<Option<AttnPlacement>> {
        let mode = self.str(&format!("net.{who}.attn.mode"));
        if mode == "none" {
            return Ok(None);
        }
        let mode: AttentionMode = mode.parse()?;
        let heads: usize = self.parse(&format!("net.{who}.attn.heads"))?;
        Ok(Some(AttnPlacement {
            resolution: self.parse(&format!("net.{who}.attn.resolution"))?,
            mode,
            patch_size: self.parse(&format!("net.{who}.attn.patch_size"))?,
            heads: (heads > 0).then_some(heads),
        }))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_pairs(std::iter::empty::<(String, String)>()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Builds a config from defaults overlaid with `pairs` (later pairs win).
    pub fn from_pairs<K, V>(pairs: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            let k = k.as_ref();
            if key_index(k).is_none() {
                return Err(unknown_key(k));
            }
            values.insert(k.to_string(), v.as_ref().to_string());
        }
        Self::build(values)
    }

    /// Returns a copy with `overrides` applied.
    pub fn with_overrides<K, V>(&self, overrides: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut values = self.values.clone();
        for (k, v) in overrides {
            let k = k.as_ref();
            if key_index(k).is_none() {
                return Err(unknown_key(k));
            }
            values.insert(k.to_string(), v.as_ref().to_string());
        }
        Self::build(values)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Canonical text form listing every key in registry order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.values[*k]));
        }
        out
    }

    fn build(values: BTreeMap<String, String>) -> Result<Self> {
        let r = Reader { values: &values };

        let sigma: f64 = r.parse("data.sigma")?;
        let image_size: usize = r.parse("data.image_size")?;
        let data = match r.str("data.kind") {
            "ring2d" => DatasetSpec::Ring2D {
                modes: r.parse("data.modes")?,
                radius: r.parse("data.radius")?,
                sigma,
            },
            "grid2d" => DatasetSpec::Grid2D {
                size: r.parse("data.grid_size")?,
                spacing: r.parse("data.spacing")?,
                sigma,
            },
            "mini_scenes" => DatasetSpec::MiniScenes(MiniScenesSpec {
                image_size,
                min_objects: r.parse("data.min_objects")?,
                max_objects: r.parse("data.max_objects")?,
                shadow_offset: (r.parse("data.shadow_dx")?, r.parse("data.shadow_dy")?),
                ..MiniScenesSpec::default()
            }),
            "image_folder" => DatasetSpec::ImageFolder {
                path: PathBuf::from(r.str("data.path")),
                image_size,
            },
            other => {
                return Err(Error::Config(format!(
                    "data.kind = {other:?}: expected ring2d, grid2d, mini_scenes or image_folder"
                )))
            }
        };

        let arch = match r.str("net.arch") {
            "auto" if data.is_points() => Arch::Mlp,
            "auto" | "conv" => Arch::Conv,
            "mlp" => Arch::Mlp,
            other => {
                return Err(Error::Config(format!(
                    "net.arch = {other:?}: expected conv, mlp or auto"
                )))
            }
        };
        let net = NetworkConfig {
            arch,
            latent_dim: r.parse("net.latent_dim")?,
            image_size,
            image_channels: 3,
            base_channels: r.parse("net.base_channels")?,
            max_channels: r.parse("net.max_channels")?,
            feature_dim: r.parse("net.feature_dim")?,
            mlp_hidden: r.parse("net.mlp_hidden")?,
            mlp_layers: r.parse("net.mlp_layers")?,
            data_dim: 2,
            g_attn: r.attn("g")?,
            d_attn: r.attn("d")?,
            ref_fusion_resolution: r.parse("net.ref_fusion_resolution")?,
        };

        let loss = LossConfig {
            kind: r.str("loss.kind").parse()?,
            r1_gamma: r.parse("loss.r1_gamma")?,
            r1_interval: r.parse("loss.r1_interval")?,
        };

        let steps: u64 = r.parse("train.steps")?;
        let train = TrainConfig {
            steps,
            batch_size: r.parse("train.batch_size")?,
            warmup_steps: r.auto("train.warmup_steps")?.unwrap_or(steps / 10),
            d_steps_per_g: r.parse("train.d_steps_per_g")?,
            lr: r.parse("train.lr")?,
            beta1: r.parse("train.beta1")?,
            beta2: r.parse("train.beta2")?,
            seed: r.parse("train.seed")?,
            log_interval: r.parse("train.log_interval")?,
            checkpoint_interval: r.parse("train.checkpoint_interval")?,
            g_ema_half_life: r.parse("train.g_ema_half_life")?,
        };

        let metrics = match r.str("eval.metrics") {
            "auto" if data.is_points() => vec![Metric::ModeCoverage],
            "auto" => vec![Metric::Ffd, Metric::Fddf],
            "" | "none" => Vec::new(),
            list => list.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
        };
        let eval = EvalConfig {
            metrics,
            samples: r.parse("eval.samples")?,
            interval: r.parse("eval.interval")?,
            seed: r.parse("eval.seed")?,
            radius: r.auto("eval.radius")?.unwrap_or(3.0 * sigma),
            extractor_seed: r.parse("eval.extractor_seed")?,
        };

        let cfg = Self {
            data,
            data_samples: r.parse("data.samples")?,
            net,
            loss,
            train,
            eval,
            output_dir: PathBuf::from(r.str("output.dir")),
            values: values.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if t.warmup_steps > t.steps {
            return err(format!(
                "train.warmup_steps {} exceeds train.steps {}",
                t.warmup_steps, t.steps
            ));
        }
        if t.batch_size == 0 {
            return err("train.batch_size must be positive".into());
        }
        if self.loss.kind == LossKind::DualContrastive && t.batch_size < 2 {
            return err("dual_contrastive needs train.batch_size ≥ 2".into());
        }
        if t.d_steps_per_g == 0 {
            return err("train.d_steps_per_g must be positive".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return err("train.lr must be positive and betas in [0, 1)".into());
        }
        if !(t.g_ema_half_life >= 0.0) || t.g_ema_half_life.is_infinite() {
            return err("train.g_ema_half_life must be finite and non-negative".into());
        }
        if self.loss.r1_interval == 0 || !(self.loss.r1_gamma >= 0.0) {
            return err("loss.r1_interval must be positive and loss.r1_gamma non-negative".into());
        }
        if self.eval.samples < 2 {
            return err("eval.samples must be at least 2".into());
        }
        if self.data_samples == 1 {
            return err("data.samples must be 0 or at least 2".into());
        }
        let points = self.data.is_points();
        match (self.net.arch, points) {
            (Arch::Mlp, false) => return err("net.arch = mlp needs a point dataset".into()),
            (Arch::Conv, true) => return err("net.arch = conv needs an image dataset".into()),
            _ => {}
        }
        if !points && self.eval.metrics.contains(&Metric::ModeCoverage) {
            return err("mode_coverage needs a point dataset".into());
        }
        if let DatasetSpec::MiniScenes(s) = &self.data {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DatasetSpec::ImageFolder { path, .. } = &self.data {
            if path.as_os_str().is_empty() {
                return err("data.path is required for image_folder".into());
            }
        }
        self.net.validate()
    }
}
