//! Plain-text run configuration: one `key = value` per line, `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapters::Recipe;
use crate::backbone::{build_model, Mode, Model, ModelConfig, Placement};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate, gen_longrange, load_dataset, split_80_20, Dataset, History, OptimizerState,
    TrainConfig, Trainer,
};

/// Everything needed to reproduce a run: architecture, optimiser schedule and data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// LKDS file; `None` means the synthetic long-range task.
    pub data: Option<PathBuf>,
    pub synthetic_n: usize,
    pub data_seed: u64,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            synthetic_n: 2000,
            data_seed: 0,
            split_seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "in_channels",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "classes",
    "cls_token",
    "placement",
    "bottleneck",
    "kernel",
    "recipe",
    "dilation",
    "mode",
    "epochs",
    "batch_size",
    "lr_max",
    "lr_min",
    "warmup_frac",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "data",
    "synthetic_n",
    "data_seed",
    "split_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} expects true/false, got {value:?}"
        ))),
    }
}

fn none_or<T>(value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        f(value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "cls_token" => m.cls_token = parse_bool(key, value)?,
            "placement" => m.placement = none_or(value, Placement::from_str)?,
            "bottleneck" => m.bottleneck = parse(key, value)?,
            "kernel" => m.kernel = none_or(value, |v| parse(key, v))?,
            "recipe" => m.recipe = Recipe::from_str(value)?,
            "dilation" => m.dilation = parse(key, value)?,
            "mode" => m.mode = Mode::from_str(value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_max" => t.lr_max = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "warmup_frac" => t.warmup_frac = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "data" => {
                self.data = if value.is_empty() || value.eq_ignore_ascii_case("synthetic") {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "synthetic_n" => self.synthetic_n = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key in canonical order; floats use shortest round-trip rendering.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("classes", m.classes.to_string());
        kv("cls_token", m.cls_token.to_string());
        kv(
            "placement",
            m.placement
                .map_or("none".into(), |p| p.as_str().to_string()),
        );
        kv("bottleneck", m.bottleneck.to_string());
        kv("kernel", m.kernel.map_or("none".into(), |k| k.to_string()));
        kv("recipe", m.recipe.as_str().to_string());
        kv("dilation", m.dilation.to_string());
        kv("mode", m.mode.as_str().to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_max", t.lr_max.to_string());
        kv("lr_min", t.lr_min.to_string());
        kv("warmup_frac", t.warmup_frac.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("seed", t.seed.to_string());
        kv(
            "data",
            self.data
                .as_ref()
                .map_or("synthetic".into(), |p| p.display().to_string()),
        );
        kv("synthetic_n", self.synthetic_n.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("split_seed", self.split_seed.to_string());
        s
    }
}

/// Loads the configured LKDS file or generates the synthetic task.
pub fn load_run_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => load_dataset(path),
        None => gen_longrange(
            cfg.data_seed,
            cfg.synthetic_n,
            cfg.model.image_size,
            cfg.model.classes,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub history: History,
    pub state: OptimizerState,
    pub test_top1: f64,
}

/// Builds a model from `cfg`, trains it on `train` and scores it on `test`.
pub fn run_experiment(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    let (history, state) = Trainer::new(&mut model, train, cfg.train.clone())?.run()?;
    let test_top1 = evaluate(&model, test)?;
    Ok(RunOutcome {
        model,
        history,
        state,
        test_top1,
    })
}

/// Data for `cfg`, split into train and test partitions.
pub fn split_run_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    split_80_20(&load_run_data(cfg)?, cfg.split_seed)
}
