//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, `HEAR_DATA_DIR`, the
//! `--config` file, then command-line flags and `--set key=value`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use hear_core::evaluation::FinetuneConfig;
use hear_core::model::{ModelConfig, Variant};
use hear_core::pretraining::{OptimConfig, PretrainConfig};
use hear_core::signal::PreprocessConfig;

pub const DATA_DIR_ENV: &str = "HEAR_DATA_DIR";

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "data", "dataset root (manifest + subsets); HEAR_DATA_DIR overrides the default"),
    ("dictionary", "", "channel dictionary file; empty uses the bundled one"),
    ("model", "custom", "architecture preset: tiny, base or custom"),
    ("window_len", "200", "patch length w in samples"),
    ("hidden_dim", "32", "embedding width D (custom)"),
    ("num_layers", "2", "transformer layers (custom)"),
    ("num_heads", "4", "attention heads (custom)"),
    ("max_time_patches", "16", "longest sample in patches"),
    ("codebook_size", "2048", "codebook entries K"),
    ("bias_hidden", "32", "spatial bias network width"),
    ("mlp_ratio", "2", "feed-forward expansion (custom)"),
    ("mask_ratio", "0.5", "fraction of patches masked in pretraining"),
    ("lr", "0.001", "peak learning rate"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("batch_size", "16", "samples per layout-homogeneous batch"),
    ("prefetch_depth", "2", "batches loaded ahead of training; 0 loads inline"),
    ("steps", "500", "pretraining optimizer steps"),
    ("epochs", "10", "fine-tuning epochs"),
    ("linear_probe", "false", "fine-tune the classifier head only"),
    ("seed", "0", "run seed"),
    ("seeds", "0,1,2", "evaluation seeds"),
    ("classes", "2", "number of target classes"),
    ("sample_rate", "200", "target sampling rate in Hz"),
    ("band_lo", "1", "band-pass low edge in Hz"),
    ("band_hi", "75", "band-pass high edge in Hz"),
    ("amplitude_scale", "0.01", "factor applied to filtered signals"),
    ("checkpoint", "checkpoint.hear", "pretrained checkpoint path"),
    ("finetuned", "finetuned.hear", "fine-tuned checkpoint path"),
    ("log", "pretrain.log", "pretraining loss log"),
    ("finetune_log", "finetune.log", "fine-tuning epoch log"),
    ("results", "results.txt", "evaluation results table"),
    ("dataset_name", "dataset", "dataset label in the results table"),
    ("gen_samples", "200", "synthetic samples per layout"),
    ("gen_classes", "2", "synthetic classes"),
    ("gen_duration", "4", "synthetic sample length in seconds"),
    ("gen_noise", "1", "synthetic noise standard deviation"),
    ("topomap_samples", "16", "samples averaged for the channel activation map"),
    ("topomap_layout", "", "subset id to map; empty takes the first"),
    ("topomap_out", "topomap", "output prefix for .csv and .svg"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Text appended to `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (key = default: description):\n");
    for (k, d, desc) in KEYS {
        let shown = if d.is_empty() { "\"\"" } else { d };
        s.push_str(&format!("  {k} = {shown}: {desc}\n"));
    }
    s
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults plus the environment.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                c.values.insert("data_dir", dir);
            }
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match KEYS.iter().find(|(k, _, _)| *k == key) {
            Some((k, _, _)) => {
                self.values.insert(k, value.trim().to_string());
                Ok(())
            }
            None => err(format!("unknown config key '{key}'")),
        }
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        match pair.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v),
            None => err(format!("expected key=value, got '{pair}'")),
        }
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("{origin}:{}: expected key = value", n + 1));
            };
            self.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.str(key)
            .parse()
            .map_err(|_| ConfigError(format!("invalid value '{}' for {key}", self.str(key))))
    }

    pub fn seeds(&self) -> Result<Vec<u64>, ConfigError> {
        let s = self.str("seeds");
        let seeds: Result<Vec<u64>, _> = s.split(',').map(|v| v.trim().parse()).collect();
        match seeds {
            Ok(v) if !v.is_empty() => Ok(v),
            _ => err(format!("invalid value '{s}' for seeds")),
        }
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let mut c = match self.str("model") {
            "tiny" => ModelConfig::tiny(),
            "base" => ModelConfig::base(),
            "custom" => ModelConfig {
                hidden_dim: self.parse("hidden_dim")?,
                num_layers: self.parse("num_layers")?,
                num_heads: self.parse("num_heads")?,
                mlp_ratio: self.parse("mlp_ratio")?,
                variant: Variant::Custom,
                ..ModelConfig::desk()
            },
            other => return err(format!("unknown model '{other}'")),
        };
        c.window_len = self.parse("window_len")?;
        c.max_time_patches = self.parse("max_time_patches")?;
        c.codebook_size = self.parse("codebook_size")?;
        c.bias_hidden = self.parse("bias_hidden")?;
        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(c)
    }

    pub fn preprocess(&self) -> Result<PreprocessConfig, ConfigError> {
        Ok(PreprocessConfig {
            target_rate: self.parse("sample_rate")?,
            band_lo: self.parse("band_lo")?,
            band_hi: self.parse("band_hi")?,
            amplitude_scale: self.parse("amplitude_scale")?,
            window_len: self.parse("window_len")?,
        })
    }

    pub fn optim(&self) -> Result<OptimConfig, ConfigError> {
        Ok(OptimConfig {
            lr: self.parse("lr")?,
            weight_decay: self.parse("weight_decay")?,
            ..OptimConfig::default()
        })
    }

    pub fn objective(&self) -> Result<PretrainConfig, ConfigError> {
        let mask_ratio: f64 = self.parse("mask_ratio")?;
        if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
            return err("mask_ratio must lie in (0, 1]");
        }
        Ok(PretrainConfig {
            mask_ratio,
            seed: self.parse("seed")?,
            optim: self.optim()?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig, ConfigError> {
        Ok(FinetuneConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.positive("batch_size")?,
            optim: self.optim()?,
            linear_probe: self.parse("linear_probe")?,
            preprocess: self.preprocess()?,
        })
    }

    pub fn positive(&self, key: &str) -> Result<usize, ConfigError> {
        match self.parse::<usize>(key)? {
            0 => err(format!("{key} must be positive")),
            v => Ok(v),
        }
    }
}
