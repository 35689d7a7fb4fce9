//! Flat `key = value` experiment configuration, one entry per line, `#`
//! starts a comment. Unknown keys and malformed values are rejected with
//! the offending line number.
//!
//! Trainer settings default from `strategy` and `n_shot` and explicit keys
//! override them, so the echoed file (every resolved value spelled out)
//! parses back to an equal config.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fslab::data::{AugmentLevel, SynthConfig};
use fslab::encoder::EncoderConfig;
use fslab::schedules::LambdaShape;
use fslab::strategies::{PretrainConfig, PriorMode, Strategy, TrainRunConfig};

use crate::error::{CliError, CliResult};

/// Name of the resolved config written into every output directory.
pub const ECHO_FILE: &str = "config.txt";

const KEYS: &[&str] = &[
    "dataset",
    "manifest",
    "synth.classes",
    "synth.per_class",
    "synth.seed",
    "synth.hue_jitter",
    "synth.scale_jitter",
    "synth.pixel_noise",
    "synth.background_jitter",
    "synth.brightness_jitter",
    "pool_per_class",
    "encoder.image_size",
    "encoder.patch_size",
    "encoder.embed_dim",
    "encoder.num_blocks",
    "encoder.num_heads",
    "encoder.mlp_hidden",
    "encoder.output_dim",
    "encoder.seed",
    "encoder.checkpoint",
    "warm_start",
    "warm_start.classes",
    "warm_start.epochs",
    "warm_start.batch_size",
    "warm_start.lr",
    "warm_start.seed",
    "strategy",
    "n_shot",
    "shots",
    "alphas",
    "text_priors",
    "text_priors.path",
    "text_priors.per_class",
    "augment",
    "seeds",
    "out",
    "jobs",
    "epochs",
    "batch_size",
    "sampler",
    "classes_per_batch",
    "instances_per_class",
    "label_smoothing",
    "dropout",
    "weight_decay",
    "head_lr_scale",
    "warmup_fraction",
    "lambda_override",
    "include_self",
    "lora.rank",
    "lora.alpha",
    "lora.blocks",
    "lora.dropout",
    "proj.hidden",
    "proj.dim",
    "eval_every_epoch",
    "schedule.lr_base",
    "schedule.lr_final",
    "schedule.tau_start",
    "schedule.tau_end",
    "schedule.lambda_start",
    "schedule.lambda_end",
    "schedule.lambda_warmup_fraction",
    "schedule.lambda_shape",
];

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synth(SynthConfig),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSource {
    pub mode: PriorMode,
    pub path: Option<PathBuf>,
    /// Held-out images per class in proxy mode.
    pub per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Images per class in each of the train and test pools.
    pub pool_per_class: usize,
    pub encoder: EncoderConfig,
    /// Frozen weights to load instead of initializing from `encoder`.
    pub encoder_checkpoint: Option<PathBuf>,
    pub warm_start: Option<PretrainConfig>,
    /// Resolved trainer settings; `seed` and `augment` hold the first
    /// entries of `seeds` and `augment`.
    pub train: TrainRunConfig,
    /// Shot grid for the prototype sweep.
    pub shots: Vec<usize>,
    pub alphas: Vec<f64>,
    pub priors: PriorSource,
    /// One training run per level and seed.
    pub augment: Vec<AugmentLevel>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

fn bad_value(key: &str, line: usize, raw: &str, err: impl Display) -> CliError {
    CliError::config(format!("line {line}: invalid value '{raw}' for '{key}': {err}"))
}

fn parse_one<T: FromStr>(key: &str, line: usize, raw: &str) -> CliResult<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| bad_value(key, line, raw, e))
}

impl Entries {
    fn read(text: &str) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or_default().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {line}: expected 'key = value', got '{content}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::config(format!("line {line}: unknown key '{k}'")));
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(CliError::config(format!("line {line}: duplicate key '{k}'")));
            }
        }
        Ok(Self { map })
    }

    fn opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.map.get(key).map(|(line, raw)| parse_one(key, *line, raw)).transpose()
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// `none` or a value.
    fn maybe<T: FromStr>(&self, key: &str, default: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some((_, raw)) if raw == "none" => Ok(None),
            Some((line, raw)) => parse_one(key, *line, raw).map(Some),
        }
    }

    /// Comma-separated list.
    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> CliResult<Vec<T>>
    where
        T::Err: Display,
    {
        let Some((line, raw)) = self.map.get(key) else {
            return Ok(default);
        };
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_one(key, *line, s))
            .collect::<CliResult<Vec<T>>>()?;
        if items.is_empty() {
            return Err(bad_value(key, *line, raw, "empty list"));
        }
        Ok(items)
    }
}

macro_rules! set {
    ($e:expr, $key:literal, $field:expr) => {
        if let Some(v) = $e.opt($key)? {
            $field = v;
        }
    };
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let e = Entries::read(text)?;

        let dataset = match e.get("dataset", "synth".to_string())?.as_str() {
            "synth" => {
                let d = SynthConfig::default();
                DatasetSource::Synth(SynthConfig {
                    num_classes: e.get("synth.classes", d.num_classes)?,
                    per_class: e.get("synth.per_class", d.per_class)?,
                    image_size: e.get("encoder.image_size", d.image_size)?,
                    seed: e.get("synth.seed", d.seed)?,
                    hue_jitter: e.get("synth.hue_jitter", d.hue_jitter)?,
                    scale_jitter: e.get("synth.scale_jitter", d.scale_jitter)?,
                    pixel_noise: e.get("synth.pixel_noise", d.pixel_noise)?,
                    background_jitter: e.get("synth.background_jitter", d.background_jitter)?,
                    brightness_jitter: e.get("synth.brightness_jitter", d.brightness_jitter)?,
                })
            }
            "manifest" => DatasetSource::Manifest(
                e.opt("manifest")?
                    .ok_or_else(|| CliError::config("dataset = manifest needs a 'manifest' path"))?,
            ),
            other => return Err(CliError::config(format!("unknown dataset '{other}' (synth|manifest)"))),
        };

        let d = EncoderConfig::default();
        let encoder = EncoderConfig {
            image_size: e.get("encoder.image_size", d.image_size)?,
            patch_size: e.get("encoder.patch_size", d.patch_size)?,
            embed_dim: e.get("encoder.embed_dim", d.embed_dim)?,
            num_blocks: e.get("encoder.num_blocks", d.num_blocks)?,
            num_heads: e.get("encoder.num_heads", d.num_heads)?,
            mlp_hidden: e.get("encoder.mlp_hidden", d.mlp_hidden)?,
            output_dim: e.get("encoder.output_dim", d.output_dim)?,
            seed: e.get("encoder.seed", d.seed)?,
        };
        encoder.validate()?;

        let warm_start = if e.get("warm_start", false)? {
            let d = PretrainConfig::default();
            Some(PretrainConfig {
                classes: e.get("warm_start.classes", d.classes)?,
                epochs: e.get("warm_start.epochs", d.epochs)?,
                batch_size: e.get("warm_start.batch_size", d.batch_size)?,
                lr: e.get("warm_start.lr", d.lr)?,
                seed: e.get("warm_start.seed", d.seed)?,
                ..d
            })
        } else {
            None
        };

        let seeds: Vec<u64> = e.list("seeds", vec![0])?;
        let augment: Vec<AugmentLevel> = e.list("augment", vec![AugmentLevel::None])?;
        let strategy: Strategy = e.get("strategy", Strategy::LinearProbe)?;
        let n_shot: usize = e.get("n_shot", 5)?;
        let mut t = TrainRunConfig::for_shot(strategy, n_shot);
        t.seed = seeds[0];
        t.augment = augment[0];
        set!(e, "epochs", t.epochs);
        set!(e, "batch_size", t.batch_size);
        set!(e, "sampler", t.sampler);
        set!(e, "classes_per_batch", t.classes_per_batch);
        set!(e, "instances_per_class", t.instances_per_class);
        set!(e, "label_smoothing", t.label_smoothing);
        set!(e, "dropout", t.dropout);
        set!(e, "weight_decay", t.weight_decay);
        set!(e, "head_lr_scale", t.head_lr_scale);
        set!(e, "warmup_fraction", t.warmup_fraction);
        t.lambda_override = e.maybe("lambda_override", t.lambda_override)?;
        set!(e, "include_self", t.include_self);
        set!(e, "lora.rank", t.lora_rank);
        t.lora_alpha = e.maybe("lora.alpha", t.lora_alpha)?;
        // the per-shot default targets the full-depth encoder
        t.lora_blocks = t.lora_blocks.min(encoder.num_blocks);
        set!(e, "lora.blocks", t.lora_blocks);
        set!(e, "lora.dropout", t.lora_dropout);
        set!(e, "proj.hidden", t.proj_hidden);
        set!(e, "proj.dim", t.proj_dim);
        set!(e, "eval_every_epoch", t.eval_every_epoch);
        set!(e, "schedule.lr_base", t.schedule.lr_base);
        set!(e, "schedule.lr_final", t.schedule.lr_final);
        set!(e, "schedule.tau_start", t.schedule.tau_start);
        set!(e, "schedule.tau_end", t.schedule.tau_end);
        set!(e, "schedule.lambda_start", t.schedule.lambda_start);
        set!(e, "schedule.lambda_end", t.schedule.lambda_end);
        set!(e, "schedule.lambda_warmup_fraction", t.schedule.lambda_warmup_fraction);
        let shape: Option<LambdaShape> = e.opt("schedule.lambda_shape")?;
        if let Some(s) = shape {
            t.schedule.lambda_shape = s;
        }
        if strategy != Strategy::Prototype {
            t.validate()?;
        }

        let cfg = Self {
            dataset,
            pool_per_class: e.get("pool_per_class", 20)?,
            encoder,
            encoder_checkpoint: e.opt("encoder.checkpoint")?,
            warm_start,
            train: t,
            shots: e.list("shots", vec![1, 3, 5, 10, 20])?,
            alphas: e.list("alphas", vec![0.0, 0.2, 0.5, 0.7])?,
            priors: PriorSource {
                mode: e.get("text_priors", PriorMode::HeldoutProxy)?,
                path: e.opt("text_priors.path")?,
                per_class: e.get("text_priors.per_class", 5)?,
            },
            augment,
            seeds,
            out: e.get("out", PathBuf::from("runs"))?,
            jobs: e.get("jobs", 1)?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> CliResult<()> {
        if self.pool_per_class == 0 {
            return Err(CliError::config("pool_per_class must be positive"));
        }
        if self.shots.contains(&0) {
            return Err(CliError::config("shots must be positive"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(CliError::config(format!("alpha {a} outside [0, 1]")));
        }
        if self.priors.mode == PriorMode::None && self.alphas.iter().any(|&a| a > 0.0) {
            return Err(CliError::config("alphas above 0 need text_priors = heldout-proxy or file"));
        }
        if self.priors.mode == PriorMode::File && self.priors.path.is_none() {
            return Err(CliError::config("text_priors = file needs text_priors.path"));
        }
        if self.priors.per_class == 0 {
            return Err(CliError::config("text_priors.per_class must be positive"));
        }
        if self.jobs == 0 {
            return Err(CliError::config("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Replaces the seed list with a single seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.train.seed = seed;
    }

    /// Every resolved setting as config text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.dataset {
            DatasetSource::Synth(c) => {
                kv("dataset", &"synth");
                kv("synth.classes", &c.num_classes);
                kv("synth.per_class", &c.per_class);
                kv("synth.seed", &c.seed);
                kv("synth.hue_jitter", &c.hue_jitter);
                kv("synth.scale_jitter", &c.scale_jitter);
                kv("synth.pixel_noise", &c.pixel_noise);
                kv("synth.background_jitter", &c.background_jitter);
                kv("synth.brightness_jitter", &c.brightness_jitter);
            }
            DatasetSource::Manifest(p) => {
                kv("dataset", &"manifest");
                kv("manifest", &p.display());
            }
        }
        kv("pool_per_class", &self.pool_per_class);
        let c = &self.encoder;
        kv("encoder.image_size", &c.image_size);
        kv("encoder.patch_size", &c.patch_size);
        kv("encoder.embed_dim", &c.embed_dim);
        kv("encoder.num_blocks", &c.num_blocks);
        kv("encoder.num_heads", &c.num_heads);
        kv("encoder.mlp_hidden", &c.mlp_hidden);
        kv("encoder.output_dim", &c.output_dim);
        kv("encoder.seed", &c.seed);
        if let Some(p) = &self.encoder_checkpoint {
            kv("encoder.checkpoint", &p.display());
        }
        match &self.warm_start {
            Some(w) => {
                kv("warm_start", &true);
                kv("warm_start.classes", &w.classes);
                kv("warm_start.epochs", &w.epochs);
                kv("warm_start.batch_size", &w.batch_size);
                kv("warm_start.lr", &w.lr);
                kv("warm_start.seed", &w.seed);
            }
            None => kv("warm_start", &false),
        }
        let t = &self.train;
        kv("strategy", &t.strategy);
        kv("n_shot", &t.n_shot);
        kv("shots", &join(&self.shots));
        kv("alphas", &join(&self.alphas));
        kv("text_priors", &self.priors.mode);
        if let Some(p) = &self.priors.path {
            kv("text_priors.path", &p.display());
        }
        kv("text_priors.per_class", &self.priors.per_class);
        kv("augment", &join(&self.augment));
        kv("seeds", &join(&self.seeds));
        kv("out", &self.out.display());
        kv("jobs", &self.jobs);
        kv("epochs", &t.epochs);
        kv("batch_size", &t.batch_size);
        kv("sampler", &t.sampler);
        kv("classes_per_batch", &t.classes_per_batch);
        kv("instances_per_class", &t.instances_per_class);
        kv("label_smoothing", &t.label_smoothing);
        kv("dropout", &t.dropout);
        kv("weight_decay", &t.weight_decay);
        kv("head_lr_scale", &t.head_lr_scale);
        kv("warmup_fraction", &t.warmup_fraction);
        kv("lambda_override", &opt(t.lambda_override));
        kv("include_self", &t.include_self);
        kv("lora.rank", &t.lora_rank);
        kv("lora.alpha", &opt(t.lora_alpha));
        kv("lora.blocks", &t.lora_blocks);
        kv("lora.dropout", &t.lora_dropout);
        kv("proj.hidden", &t.proj_hidden);
        kv("proj.dim", &t.proj_dim);
        kv("eval_every_epoch", &t.eval_every_epoch);
        let sc = &t.schedule;
        kv("schedule.lr_base", &sc.lr_base);
        kv("schedule.lr_final", &sc.lr_final);
        kv("schedule.tau_start", &sc.tau_start);
        kv("schedule.tau_end", &sc.tau_end);
        kv("schedule.lambda_start", &sc.lambda_start);
        kv("schedule.lambda_end", &sc.lambda_end);
        kv("schedule.lambda_warmup_fraction", &sc.lambda_warmup_fraction);
        kv("schedule.lambda_shape", &sc.lambda_shape);
        s
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}
