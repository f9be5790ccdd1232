//! Experiment configuration: a flat `section.key = value` text format with
//! `#` comments. Unknown keys are rejected; every error carries its line
//! number; all defaults are resolved up front and the effective config can
//! be echoed back out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use memaudit_core::data::{CanarySpec, TokenizeMode};
use memaudit_core::model::TuningStrategy;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: {msg}")]
    Bad {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: missing required key `{key}`")]
    Missing { path: String, key: String },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // model
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    pub tied_embeddings: bool,

    // data
    pub pretrain_paths: Vec<PathBuf>,
    pub finetune_paths: Vec<PathBuf>,
    pub tokenizer: TokenizeMode,
    pub val_fraction: f64,
    pub canary: Option<CanarySpec>,

    // train
    pub learning_rates: Vec<f64>,
    pub strategies: Vec<TuningStrategy>,
    pub epochs: u32,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub repeats: usize,
    pub keep_all_checkpoints: bool,
    pub pretrain_epochs: u32,
    pub pretrain_lr: f64,

    // attack
    pub fpr_cap: f64,
    pub max_members: usize,
    pub max_nonmembers: usize,
    pub exposure_samples: usize,
    pub exposure_budget: u64,
    pub exposure_final_exact: bool,
    pub score_batch: usize,

    // run
    pub out_dir: PathBuf,
    pub master_seed: u64,
    pub workers: usize,
}

/// Keys the parser accepts, with their documented defaults.
const KNOWN_KEYS: &[&str] = &[
    "model.blocks",
    "model.d_model",
    "model.heads",
    "model.d_ff",
    "model.context",
    "model.tied",
    "data.pretrain",
    "data.finetune",
    "data.tokenizer",
    "data.max_vocab",
    "data.val_fraction",
    "data.canary.template",
    "data.canary.secret",
    "data.canary.copies",
    "train.lr",
    "train.strategies",
    "train.epochs",
    "train.batch_size",
    "train.seq_len",
    "train.weight_decay",
    "train.grad_clip",
    "train.repeats",
    "train.keep_checkpoints",
    "train.pretrain_epochs",
    "train.pretrain_lr",
    "attack.fpr_cap",
    "attack.max_members",
    "attack.max_nonmembers",
    "attack.exposure_samples",
    "attack.exposure_budget",
    "attack.exposure_final_exact",
    "attack.batch",
    "run.out_dir",
    "run.seed",
    "run.workers",
];

struct RawConfig {
    path: String,
    entries: BTreeMap<String, (usize, String)>, // key -> (line, value)
}

impl RawConfig {
    fn parse(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse_str(&text, &path.display().to_string())
    }

    fn parse_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw_line).trim().to_string();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Bad {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    path: path.to_string(),
                    line: line_no,
                    key,
                });
            }
            if entries.insert(key.clone(), (line_no, value)).is_some() {
                return Err(ConfigError::Bad {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(RawConfig {
            path: path.to_string(),
            entries,
        })
    }

    fn bad(&self, key: &str, msg: String) -> ConfigError {
        let line = self.entries.get(key).map(|(l, _)| *l).unwrap_or(0);
        ConfigError::Bad {
            path: self.path.clone(),
            line,
            msg: format!("{key}: {msg}"),
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing {
            path: self.path.clone(),
            key: key.to_string(),
        })
    }

    fn parse_with<T>(
        &self,
        key: &str,
        default: T,
        f: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => f(v).map_err(|msg| self.bad(key, msg)),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Split a `[a, b, c]` list on commas that are not inside parentheses.
fn parse_list(value: &str) -> Result<Vec<String>, String> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| format!("expected `[ ... ]` list, got `{value}`"))?;
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in inner.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                cur.push(c);
            }
            ',' if depth == 0 => {
                items.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        items.push(cur.trim().to_string());
    }
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(path)?;
        Self::from_raw(raw)
    }

    pub fn from_str_for_tests(text: &str, name: &str) -> Result<Self, ConfigError> {
        Self::from_raw(RawConfig::parse_str(text, name)?)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let d_model = raw.parse_with("model.d_model", 128, num::<usize>)?;

        let paths = |v: &str| -> Result<Vec<PathBuf>, String> {
            let items = if v.starts_with('[') {
                parse_list(v)?
            } else {
                vec![v.to_string()]
            };
            Ok(items.into_iter().map(PathBuf::from).collect())
        };

        let max_vocab = raw.parse_with("data.max_vocab", 2000, num::<usize>)?;
        let tokenizer = raw.parse_with(
            "data.tokenizer",
            TokenizeMode::Word { max_vocab },
            |v| match v {
                "word" => Ok(TokenizeMode::Word { max_vocab }),
                "char" => Ok(TokenizeMode::Char),
                _ => Err(format!("expected word|char, got `{v}`")),
            },
        )?;

        let canary = match (
            raw.get("data.canary.template"),
            raw.get("data.canary.secret"),
        ) {
            (None, None) => None,
            (Some(template), Some(secret)) => {
                let copies = raw.parse_with("data.canary.copies", 50, num::<usize>)?;
                let spec = CanarySpec::new(template, secret, copies);
                spec.validate().map_err(|e| {
                    raw.bad("data.canary.template", e.to_string())
                })?;
                Some(spec)
            }
            _ => {
                return Err(ConfigError::Invalid {
                    path: raw.path.clone(),
                    msg: "canary needs both data.canary.template and data.canary.secret".into(),
                })
            }
        };

        let learning_rates = raw.parse_with("train.lr", vec![2e-5, 1e-4, 1e-3], |v| {
            parse_list(v)?.iter().map(|s| num::<f64>(s)).collect()
        })?;
        let strategies = raw.parse_with(
            "train.strategies",
            vec![
                TuningStrategy::Full,
                TuningStrategy::Head,
                TuningStrategy::Adapters(16),
            ],
            |v| {
                parse_list(v)?
                    .iter()
                    .map(|s| s.parse::<TuningStrategy>().map_err(|e| e.to_string()))
                    .collect()
            },
        )?;

        let cfg = ExperimentConfig {
            n_blocks: raw.parse_with("model.blocks", 4, num::<usize>)?,
            d_model,
            n_heads: raw.parse_with("model.heads", 4, num::<usize>)?,
            d_ff: raw.parse_with("model.d_ff", 4 * d_model, num::<usize>)?,
            context_length: raw.parse_with("model.context", 64, num::<usize>)?,
            tied_embeddings: raw.parse_with("model.tied", true, boolean)?,

            pretrain_paths: paths(raw.required("data.pretrain")?)
                .map_err(|m| raw.bad("data.pretrain", m))?,
            finetune_paths: paths(raw.required("data.finetune")?)
                .map_err(|m| raw.bad("data.finetune", m))?,
            tokenizer,
            val_fraction: raw.parse_with("data.val_fraction", 0.25, num::<f64>)?,
            canary,

            learning_rates,
            strategies,
            epochs: raw.parse_with("train.epochs", 20, num::<u32>)?,
            batch_size: raw.parse_with("train.batch_size", 8, num::<usize>)?,
            seq_len: raw.parse_with("train.seq_len", 32, num::<usize>)?,
            weight_decay: raw.parse_with("train.weight_decay", 0.0, num::<f64>)?,
            grad_clip: raw.parse_with("train.grad_clip", Some(1.0), |v| match v {
                "none" => Ok(None),
                _ => num::<f64>(v).map(Some),
            })?,
            repeats: raw.parse_with("train.repeats", 3, num::<usize>)?,
            keep_all_checkpoints: raw.parse_with("train.keep_checkpoints", true, |v| match v {
                "all" => Ok(true),
                "final" => Ok(false),
                _ => Err(format!("expected all|final, got `{v}`")),
            })?,
            pretrain_epochs: raw.parse_with("train.pretrain_epochs", 8, num::<u32>)?,
            pretrain_lr: raw.parse_with("train.pretrain_lr", 1e-3, num::<f64>)?,

            fpr_cap: raw.parse_with("attack.fpr_cap", 0.10, num::<f64>)?,
            max_members: raw.parse_with("attack.max_members", 0, num::<usize>)?,
            max_nonmembers: raw.parse_with("attack.max_nonmembers", 0, num::<usize>)?,
            exposure_samples: raw.parse_with("attack.exposure_samples", 250, num::<usize>)?,
            exposure_budget: raw.parse_with(
                "attack.exposure_budget",
                memaudit_core::attacks::DEFAULT_EXACT_BUDGET,
                num::<u64>,
            )?,
            exposure_final_exact: raw.parse_with("attack.exposure_final_exact", true, boolean)?,
            score_batch: raw.parse_with("attack.batch", 16, num::<usize>)?,

            out_dir: PathBuf::from(raw.required("run.out_dir")?),
            master_seed: raw.parse_with("run.seed", 0, num::<u64>)?,
            workers: raw.parse_with("run.workers", 1, num::<usize>)?,
        };
        cfg.validate(&raw.path)?;
        Ok(cfg)
    }

    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let fail = |msg: String| ConfigError::Invalid {
            path: path.to_string(),
            msg,
        };
        self.model_config(1).validate().map_err(|e| fail(e.to_string()))?;
        if self.learning_rates.iter().any(|&lr| lr <= 0.0) {
            return Err(fail("learning rates must be positive".into()));
        }
        if self.strategies.is_empty() || self.learning_rates.is_empty() {
            return Err(fail("need at least one strategy and one learning rate".into()));
        }
        if self.repeats == 0 || self.workers == 0 {
            return Err(fail("train.repeats and run.workers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return Err(fail(format!(
                "data.val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.fpr_cap) {
            return Err(fail(format!("attack.fpr_cap {} outside [0, 1]", self.fpr_cap)));
        }
        for s in &self.strategies {
            if matches!(s, TuningStrategy::UntiedFull) && !self.tied_embeddings {
                return Err(fail(
                    "untied-full starts from a tied model and unties it; set model.tied = true"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    /// The model shape for a given vocabulary size (tokenizer-derived).
    pub fn model_config(&self, vocab_size: usize) -> memaudit_core::model::ModelConfig {
        memaudit_core::model::ModelConfig {
            n_blocks: self.n_blocks,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            context_length: self.context_length,
            tied_embeddings: self.tied_embeddings,
            adapter_reduction: None,
        }
    }

    /// Render every effective value, for the config echo.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("model.blocks", self.n_blocks.to_string());
        kv("model.d_model", self.d_model.to_string());
        kv("model.heads", self.n_heads.to_string());
        kv("model.d_ff", self.d_ff.to_string());
        kv("model.context", self.context_length.to_string());
        kv("model.tied", self.tied_embeddings.to_string());
        kv(
            "data.pretrain",
            format!(
                "[{}]",
                self.pretrain_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        kv(
            "data.finetune",
            format!(
                "[{}]",
                self.finetune_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        match &self.tokenizer {
            TokenizeMode::Char => kv("data.tokenizer", "char".into()),
            TokenizeMode::Word { max_vocab } => {
                kv("data.tokenizer", "word".into());
                kv("data.max_vocab", max_vocab.to_string());
            }
        }
        kv("data.val_fraction", self.val_fraction.to_string());
        if let Some(c) = &self.canary {
            kv("data.canary.template", c.template.clone());
            kv("data.canary.secret", c.secret.clone());
            kv("data.canary.copies", c.copies.to_string());
        }
        kv(
            "train.lr",
            format!(
                "[{}]",
                self.learning_rates
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        kv(
            "train.strategies",
            format!(
                "[{}]",
                self.strategies
                    .iter()
                    .map(|s| s.label())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seq_len", self.seq_len.to_string());
        kv("train.weight_decay", self.weight_decay.to_string());
        kv(
            "train.grad_clip",
            self.grad_clip.map_or("none".into(), |c| c.to_string()),
        );
        kv("train.repeats", self.repeats.to_string());
        kv(
            "train.keep_checkpoints",
            if self.keep_all_checkpoints {
                "all".into()
            } else {
                "final".into()
            },
        );
        kv("train.pretrain_epochs", self.pretrain_epochs.to_string());
        kv("train.pretrain_lr", self.pretrain_lr.to_string());
        kv("attack.fpr_cap", self.fpr_cap.to_string());
        kv("attack.max_members", self.max_members.to_string());
        kv("attack.max_nonmembers", self.max_nonmembers.to_string());
        kv("attack.exposure_samples", self.exposure_samples.to_string());
        kv("attack.exposure_budget", self.exposure_budget.to_string());
        kv(
            "attack.exposure_final_exact",
            self.exposure_final_exact.to_string(),
        );
        kv("attack.batch", self.score_batch.to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("run.seed", self.master_seed.to_string());
        kv("run.workers", self.workers.to_string());
        s
    }
}
