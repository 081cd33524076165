//! `key = value` run configuration with command-line overrides.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use e2e_absa::heads::HeadVariant;
use e2e_absa::model::ModelConfig;
use e2e_absa::training::TrainConfig;

/// Raised for anything the user can fix by editing the command or config.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Directory holding `train`, `dev` and `test` splits.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compare_frozen: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: PathBuf::from("runs/latest"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            compare_frozen: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data",
    "out",
    "head",
    "head_attn_heads",
    "head_ffn_dim",
    "crf_constrained",
    "max_len",
    "num_layers",
    "dim_h",
    "num_attn_heads",
    "ffn_dim",
    "ln_eps",
    "init_std",
    "min_freq",
    "learning_rate",
    "batch_size",
    "max_steps",
    "selection_start",
    "selection_every",
    "seeds",
    "freeze_encoder",
    "dropout",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "grad_clip",
    "parallel_seeds",
    "compare_frozen",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        let (e, h, t) = (&mut self.model.encoder, &mut self.model.head, &mut self.train);
        match key.as_str() {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "head" => h.variant = value.parse::<HeadVariant>().map_err(|e| usage(e.to_string()))?,
            "head_attn_heads" => h.attn_heads = num(&key, value)?,
            "head_ffn_dim" => h.ffn_dim = num(&key, value)?,
            "crf_constrained" => h.crf_constrained = flag(&key, value)?,
            "max_len" => e.max_len = num(&key, value)?,
            "num_layers" => e.num_layers = num(&key, value)?,
            "dim_h" => e.dim_h = num(&key, value)?,
            "num_attn_heads" => e.num_attn_heads = num(&key, value)?,
            "ffn_dim" => e.ffn_dim = num(&key, value)?,
            "ln_eps" => e.ln_eps = num(&key, value)?,
            "init_std" => e.init_std = num(&key, value)?,
            "min_freq" => t.min_freq = num(&key, value)?,
            "learning_rate" => t.learning_rate = num(&key, value)?,
            "batch_size" => t.batch_size = num(&key, value)?,
            "max_steps" => t.max_steps = num(&key, value)?,
            "selection_start" => t.selection_start = num(&key, value)?,
            "selection_every" => t.selection_every = num(&key, value)?,
            "seeds" => {
                t.seeds = value
                    .split(',')
                    .map(|s| num::<u64>(&key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "freeze_encoder" => t.freeze_encoder = flag(&key, value)?,
            "dropout" => t.dropout = num(&key, value)?,
            "adam_beta1" => t.adam_beta1 = num(&key, value)?,
            "adam_beta2" => t.adam_beta2 = num(&key, value)?,
            "adam_eps" => t.adam_eps = num(&key, value)?,
            "grad_clip" => t.grad_clip = num(&key, value)?,
            "parallel_seeds" => t.parallel_seeds = num(&key, value)?,
            "compare_frozen" => self.compare_frozen = flag(&key, value)?,
            _ => return Err(usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config file body; `origin` labels error messages.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    /// Parses `--config FILE` and `--key value` / `--key=value` pairs.
    /// The config file, if any, is applied first.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut config_file = None;
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(key) = arg.strip_prefix("--") else {
                bail!(usage(format!("unexpected argument `{arg}`")));
            };
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| usage(format!("`--{key}` needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            if key == "config" {
                config_file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_file(&text, &path.display().to_string())?;
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let as_usage = |e: e2e_absa::Error| usage(e.to_string());
        self.train.validate().map_err(as_usage)?;
        let mut enc = self.model.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(2);
        enc.validate().map_err(as_usage)?;
        let h = &self.model.head;
        if h.attn_heads == 0 || !self.model.encoder.dim_h.is_multiple_of(h.attn_heads) {
            return Err(usage("head_attn_heads must divide dim_h"));
        }
        if self.data.is_none() {
            return Err(usage("`data` is required (a directory with train, dev and test files)"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in `key = value` form.
    pub fn render(&self) -> String {
        let (e, h, t) = (&self.model.encoder, &self.model.head, &self.train);
        let seeds: Vec<String> = t.seeds.iter().map(u64::to_string).collect();
        let data = self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<(&str, String)> = vec![
            ("data", data),
            ("out", self.out.display().to_string()),
            ("head", h.variant.to_string()),
            ("head_attn_heads", h.attn_heads.to_string()),
            ("head_ffn_dim", h.ffn_dim.to_string()),
            ("crf_constrained", h.crf_constrained.to_string()),
            ("max_len", e.max_len.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("dim_h", e.dim_h.to_string()),
            ("num_attn_heads", e.num_attn_heads.to_string()),
            ("ffn_dim", e.ffn_dim.to_string()),
            ("ln_eps", e.ln_eps.to_string()),
            ("init_std", e.init_std.to_string()),
            ("min_freq", t.min_freq.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("selection_start", t.selection_start.to_string()),
            ("selection_every", t.selection_every.to_string()),
            ("seeds", seeds.join(",")),
            ("freeze_encoder", t.freeze_encoder.to_string()),
            ("dropout", t.dropout.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("parallel_seeds", t.parallel_seeds.to_string()),
            ("compare_frozen", self.compare_frozen.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}
