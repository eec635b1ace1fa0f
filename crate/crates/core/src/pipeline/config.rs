//! Run configuration as flat `key=value` text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Training variants, in ablation-table row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Domain prompts, adapter, and all three losses.
    Doprompt,
    /// No prompts; plain cross-entropy.
    Erm,
    /// Prompt loss only; inference averages per-domain logits.
    NoAdapter,
    /// Weight loss disabled.
    NoLw,
    /// Adapted-prompt loss disabled.
    NoLadapt,
    /// Featurizer frozen; prompts, adapter, and classifier train.
    FrozenBackbone,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Doprompt,
        Variant::Erm,
        Variant::NoAdapter,
        Variant::NoLw,
        Variant::NoLadapt,
        Variant::FrozenBackbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Doprompt => "doprompt",
            Variant::Erm => "erm",
            Variant::NoAdapter => "no_adapter",
            Variant::NoLw => "no_lw",
            Variant::NoLadapt => "no_ladapt",
            Variant::FrozenBackbone => "frozen_backbone",
        }
    }

    /// Whether inference goes through the prompt adapter.
    pub fn uses_adapter(self) -> bool {
        !matches!(self, Variant::Erm | Variant::NoAdapter)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of doprompt, erm, no_adapter, no_lw, no_ladapt, frozen_backbone"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Samples drawn from each source domain per step.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub prompt_len: usize,
    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            dropout: 0.1,
            lambda: 1.0,
            prompt_len: 4,
            seed: 0,
            eval_interval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub variant: Variant,
    pub target_domain: usize,
    pub val_fraction: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// 0 selects the embedding width.
    pub adapter_hidden: usize,
    /// Images per inference chunk.
    pub eval_batch: usize,
    pub num_domains: usize,
    pub per_domain_count: usize,
    pub data_seed: u64,
    /// Seeds for multi-seed harnesses; empty means `[train.seed]`.
    pub seeds: Vec<u64>,
    /// Target domains for harnesses; empty means every domain.
    pub targets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = ViTConfig::default();
        RunConfig {
            train: TrainConfig::default(),
            variant: Variant::Doprompt,
            target_domain: 0,
            val_fraction: 0.2,
            image_size: vit.image_size,
            patch_size: vit.patch_size,
            embed_dim: vit.embed_dim,
            depth: vit.depth,
            num_heads: vit.num_heads,
            mlp_ratio: vit.mlp_ratio,
            adapter_hidden: 0,
            eval_batch: 64,
            num_domains: 4,
            per_domain_count: 500,
            data_seed: 0,
            seeds: Vec::new(),
            targets: Vec::new(),
            lengths: vec![2, 4, 8, 16, 32],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "steps",
        "batch_size",
        "lr",
        "weight_decay",
        "dropout",
        "lambda",
        "prompt_len",
        "seed",
        "eval_interval",
        "variant",
        "target_domain",
        "val_fraction",
        "image_size",
        "patch_size",
        "embed_dim",
        "depth",
        "num_heads",
        "mlp_ratio",
        "adapter_hidden",
        "eval_batch",
        "num_domains",
        "per_domain_count",
        "data_seed",
        "seeds",
        "targets",
        "lengths",
    ];

    /// Sets one key. Unknown keys are config errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "steps" => self.train.steps = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "dropout" => self.train.dropout = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "prompt_len" => self.train.prompt_len = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "eval_interval" => self.train.eval_interval = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "target_domain" => self.target_domain = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "num_heads" => self.num_heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "adapter_hidden" => self.adapter_hidden = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "num_domains" => self.num_domains = parse(key, v)?,
            "per_domain_count" => self.per_domain_count = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "targets" => self.targets = parse_list(key, v)?,
            "lengths" => self.lengths = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("dropout", t.dropout.to_string()),
            ("lambda", t.lambda.to_string()),
            ("prompt_len", t.prompt_len.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_interval", t.eval_interval.to_string()),
            ("variant", self.variant.to_string()),
            ("target_domain", self.target_domain.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("adapter_hidden", self.adapter_hidden.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("num_domains", self.num_domains.to_string()),
            ("per_domain_count", self.per_domain_count.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("targets", join(&self.targets)),
            ("lengths", join(&self.lengths)),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if t.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", t.lr)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", t.weight_decay)));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", t.lambda)));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", t.dropout)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} not in (0, 1)",
                self.val_fraction
            )));
        }
        if t.prompt_len == 0 || self.lengths.contains(&0) {
            return Err(Error::Config("prompt lengths must be positive".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// Seeds for multi-seed harnesses.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn target_list(&self, num_domains: usize) -> Vec<usize> {
        if self.targets.is_empty() {
            (0..num_domains).collect()
        } else {
            self.targets.clone()
        }
    }

    pub fn vit_config(&self, channels: usize, num_classes: usize) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.train.dropout as crate::tensor::Real,
            num_classes,
        }
    }
}
