//! Flat `key=value` run configuration with `#` comments.
//!
//! One namespace covers corpus generation, training, and evaluation; each
//! command reads the keys it needs. Unknown keys are rejected so typos fail
//! loudly, and flags override file values.

use std::collections::BTreeMap;

use aga_core::corpus::CorpusConfig;
use aga_core::losses::{LossWeights, Temperatures};
use aga_core::trainer::{TrainConfig, Variant};

use crate::error::CliError;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    // corpus
    "classes",
    "concepts_per_class",
    "tokens_per_concept",
    "vocab",
    "grid_rows",
    "grid_cols",
    "m_max",
    "patch_features",
    "noise_std",
    "distractor_rate",
    "concept_rate",
    "signature_base",
    "signature_unique",
    "region_min",
    "region_max",
    "train",
    "val",
    "test",
    // trainer
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "tau1",
    "tau2",
    "tau3",
    "lambda1",
    "lambda2",
    "lambda3",
    "gamma_tg",
    "gamma_vg",
    "hidden",
    "embed_dim",
    "mix_window",
    "checkpoint_every",
    // eval
    "heatmap_pairs",
];

/// Parsed and merged configuration (defaults, then file, then overrides).
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {}: expected key=value, got {raw:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown field `{key}`", lineno + 1)));
        }
        map.insert(key, value);
    }
    Ok(map)
}

impl RunConfig {
    /// Merge the optional config file text with `--set key=value` overrides.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut values = match file_text {
            Some(text) => parse_pairs(text)?,
            None => BTreeMap::new(),
        };
        for (key, value) in overrides {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config field `{key}`")));
            }
            values.insert(key.clone(), value.clone());
        }
        Ok(RunConfig { values })
    }

    /// Canonical one-line-per-key dump of every resolved value, hashed into
    /// the manifest.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KNOWN_KEYS {
            out.push_str(&format!("{key}={}\n", self.raw(key)));
        }
        out
    }

    fn raw(&self, key: &str) -> String {
        match self.values.get(key) {
            Some(v) => v.clone(),
            None => default_for(key).to_string(),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("config field `{key}`: cannot parse {raw:?}")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig, CliError> {
        let cfg = CorpusConfig {
            num_classes: self.parse("classes")?,
            concepts_per_class: self.parse("concepts_per_class")?,
            tokens_per_concept: self.parse("tokens_per_concept")?,
            vocab: self.parse("vocab")?,
            grid_rows: self.parse("grid_rows")?,
            grid_cols: self.parse("grid_cols")?,
            m_max: self.parse("m_max")?,
            patch_features: self.parse("patch_features")?,
            noise_std: self.parse("noise_std")?,
            distractor_rate: self.parse("distractor_rate")?,
            concept_rate: self.parse("concept_rate")?,
            signature_base: self.parse("signature_base")?,
            signature_unique: self.parse("signature_unique")?,
            region_min: self.parse("region_min")?,
            region_max: self.parse("region_max")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_sizes(&self) -> Result<(usize, usize, usize), CliError> {
        let sizes = (self.parse("train")?, self.parse("val")?, self.parse("test")?);
        if sizes.0 == 0 {
            return Err(CliError::Usage("config field `train`: must be >= 1".into()));
        }
        Ok(sizes)
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            adam_eps: self.parse("adam_eps")?,
            weight_decay: self.parse("weight_decay")?,
            temps: Temperatures {
                tau1: self.parse("tau1")?,
                tau2: self.parse("tau2")?,
                tau3: self.parse("tau3")?,
            },
            weights: LossWeights {
                lambda1: self.parse("lambda1")?,
                lambda2: self.parse("lambda2")?,
                lambda3: self.parse("lambda3")?,
            },
            gamma_tg: self.parse("gamma_tg")?,
            gamma_vg: self.parse("gamma_vg")?,
            variant,
            seed,
            hidden: self.parse("hidden")?,
            embed_dim: self.parse("embed_dim")?,
            mix_window: self.parse("mix_window")?,
            checkpoint_every: self.parse("checkpoint_every")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn heatmap_pairs(&self) -> Result<usize, CliError> {
        self.parse("heatmap_pairs")
    }
}

fn default_for(key: &str) -> &'static str {
    match key {
        "seed" => "0",
        "classes" => "3",
        "concepts_per_class" => "2",
        "tokens_per_concept" => "1",
        "vocab" => "64",
        "grid_rows" => "6",
        "grid_cols" => "6",
        "m_max" => "24",
        "patch_features" => "8",
        "noise_std" => "0.1",
        "distractor_rate" => "0.2",
        "concept_rate" => "0.65",
        "signature_base" => "1.0",
        "signature_unique" => "0.35",
        "region_min" => "1",
        "region_max" => "2",
        "train" => "200",
        "val" => "20",
        "test" => "50",
        "epochs" => "20",
        "batch_size" => "16",
        "lr" => "0.001",
        "beta1" => "0.9",
        "beta2" => "0.999",
        "adam_eps" => "1e-8",
        "weight_decay" => "0.0001",
        "tau1" => "0.3",
        "tau2" => "0.3",
        "tau3" => "0.1",
        "lambda1" => "0.5",
        "lambda2" => "0.5",
        "lambda3" => "0.5",
        "gamma_tg" => "0.99",
        "gamma_vg" => "0.999",
        "hidden" => "32",
        "embed_dim" => "16",
        "mix_window" => "3",
        "checkpoint_every" => "0",
        "heatmap_pairs" => "2",
        other => unreachable!("no default for {other}"),
    }
}

/// Parse a `--variant` flag value.
pub fn parse_variant(text: &str) -> Result<Variant, CliError> {
    match text {
        "full" => Ok(Variant::Full),
        "global-only" => Ok(Variant::GlobalOnly),
        "no-bcga" => Ok(Variant::NoBcga),
        other => {
            if let Some(rest) = other.strip_prefix("fixed:") {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 2 {
                    return Err(CliError::Usage(format!(
                        "variant `{other}`: expected fixed:<sigma_tg>,<sigma_vg>"
                    )));
                }
                let sigma_tg: f64 = parts[0]
                    .parse()
                    .map_err(|_| CliError::Usage(format!("variant: bad sigma_tg {:?}", parts[0])))?;
                let sigma_vg: f64 = parts[1]
                    .parse()
                    .map_err(|_| CliError::Usage(format!("variant: bad sigma_vg {:?}", parts[1])))?;
                Ok(Variant::FixedThreshold { sigma_tg, sigma_vg })
            } else {
                Err(CliError::Usage(format!(
                    "unknown variant `{other}` (expected full, global-only, no-bcga, or fixed:a,b)"
                )))
            }
        }
    }
}
