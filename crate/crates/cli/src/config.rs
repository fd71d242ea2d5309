//! Plain-text `key = value` run configuration.
//!
//! Every phantom, network and training setting has a key. `seed` is the
//! master seed: it drives the phantom, the batch sampler, and (unless set
//! explicitly) `init_seed` and `fold_seed`. The `MIMIR_SEED` environment
//! variable replaces `seed` after the file is read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mimir_core::model::{ConvBlock, NetworkConfig, DEFAULT_INPUT};
use mimir_core::phantom::{PhantomSpec, SEX_ANALOG};
use mimir_core::training::TrainingConfig;

use crate::CliError;

pub const SEED_ENV: &str = "MIMIR_SEED";

pub const KEYS: [&str; 27] = [
    "seed",
    "grid_dims",
    "voxel_size",
    "n_subjects",
    "missing_rate",
    "noise_sigma",
    "input_channels",
    "input_height",
    "input_width",
    "blocks",
    "init_seed",
    "batch_size",
    "total_iterations",
    "stage1_iterations",
    "lr_stage1",
    "lr_stage2",
    "beta1",
    "beta2",
    "epsilon",
    "augment",
    "max_shift",
    "k",
    "strata_key",
    "fold_seed",
    "level",
    "threshold",
    "group",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub input: (usize, usize, usize),
    pub blocks: Vec<ConvBlock>,
    pub init_seed: Option<u64>,
    pub training: TrainingConfig,
    /// Cross-validation folds.
    pub k: usize,
    pub strata_key: Option<String>,
    pub fold_seed: Option<u64>,
    /// Central interval level for predictions.
    pub level: f64,
    /// Decision threshold on binary-target means for sensitivity/specificity.
    pub threshold: f64,
    /// Restrict training to one registry group.
    pub group: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            phantom: PhantomSpec::default(),
            input: DEFAULT_INPUT,
            blocks: NetworkConfig::default_blocks(),
            init_seed: None,
            training: TrainingConfig::default(),
            k: 10,
            strata_key: Some(SEX_ANALOG.to_string()),
            fold_seed: None,
            level: 0.95,
            threshold: 0.5,
            group: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("config key `{key}`: expected true/false, got `{value}`"))),
    }
}

fn parse_optional(value: &str) -> Option<String> {
    match value {
        "" | "none" => None,
        v => Some(v.to_string()),
    }
}

/// `DxHxW`, e.g. `64x64x32`.
fn parse_dims(key: &str, value: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = value.split('x').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("config key `{key}`: expected DxHxW, got `{value}`")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

/// Comma-separated channel counts, `p` suffix for pooling: `16p,32p,64`.
fn parse_blocks(value: &str) -> Result<Vec<ConvBlock>, CliError> {
    value
        .split(',')
        .map(|b| {
            let b = b.trim();
            let (digits, pool) = match b.strip_suffix('p') {
                Some(d) => (d, true),
                None => (b, false),
            };
            Ok(ConvBlock {
                out_channels: parse("blocks", digits)?,
                pool,
            })
        })
        .collect()
}

fn format_blocks(blocks: &[ConvBlock]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}{}", b.out_channels, if b.pool { "p" } else { "" }))
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(CliError::Usage(format!("config key `{key}` given twice")));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let tr = &mut self.training;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "grid_dims" => self.phantom.grid_dims = parse_dims(key, value)?,
            "voxel_size" => self.phantom.voxel_size = parse(key, value)?,
            "n_subjects" => self.phantom.n_subjects = parse(key, value)?,
            "missing_rate" => self.phantom.missing_rate = parse(key, value)?,
            "noise_sigma" => self.phantom.noise_sigma = parse(key, value)?,
            "input_channels" => self.input.0 = parse(key, value)?,
            "input_height" => self.input.1 = parse(key, value)?,
            "input_width" => self.input.2 = parse(key, value)?,
            "blocks" => self.blocks = parse_blocks(value)?,
            "init_seed" => self.init_seed = Some(parse(key, value)?),
            "batch_size" => tr.batch_size = parse(key, value)?,
            "total_iterations" => tr.total_iterations = parse(key, value)?,
            "stage1_iterations" => tr.stage1_iterations = parse(key, value)?,
            "lr_stage1" => tr.lr_stage1 = parse(key, value)?,
            "lr_stage2" => tr.lr_stage2 = parse(key, value)?,
            "beta1" => tr.beta1 = parse(key, value)?,
            "beta2" => tr.beta2 = parse(key, value)?,
            "epsilon" => tr.epsilon = parse(key, value)?,
            "augment" => tr.augment = parse_bool(key, value)?,
            "max_shift" => tr.max_shift = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "strata_key" => self.strata_key = parse_optional(value),
            "fold_seed" => self.fold_seed = Some(parse(key, value)?),
            "level" => self.level = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "group" => self.group = parse_optional(value),
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}` (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Reads `path` (or defaults when `None`), then applies `env_seed`.
    pub fn load(path: Option<&Path>, env_seed: Option<&str>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Config::parse(&text)?
            }
            None => Config::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = parse(SEED_ENV, s.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self, CliError> {
        let env = std::env::var(SEED_ENV).ok();
        Config::load(path, env.as_deref())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: mimir_core::MimirError| CliError::Usage(e.to_string());
        self.phantom_spec().validate().map_err(usage)?;
        self.network(1).validate().map_err(usage)?;
        self.training_config().validate().map_err(usage)?;
        if self.k < 2 {
            return Err(CliError::Usage(format!("config key `k`: must be >= 2, got {}", self.k)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::Usage(format!("config key `level`: must lie in (0, 1), got {}", self.level)));
        }
        if !self.threshold.is_finite() {
            return Err(CliError::Usage("config key `threshold`: must be finite".into()));
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn network(&self, n_targets: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: self.input.0,
            input_height: self.input.1,
            input_width: self.input.2,
            blocks: self.blocks.clone(),
            n_targets,
            init_seed: self.init_seed.unwrap_or(self.seed),
        }
    }

    pub fn fold_seed(&self) -> u64 {
        self.fold_seed.unwrap_or(self.seed)
    }

    /// The effective configuration, one `key = value` per line, in a form
    /// [`Config::parse`] reads back to the same settings.
    pub fn to_text(&self) -> String {
        let p = self.phantom_spec();
        let t = self.training_config();
        let [d, h, w] = p.grid_dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("grid_dims", format!("{d}x{h}x{w}"));
        kv("voxel_size", p.voxel_size.to_string());
        kv("n_subjects", p.n_subjects.to_string());
        kv("missing_rate", p.missing_rate.to_string());
        kv("noise_sigma", p.noise_sigma.to_string());
        kv("input_channels", self.input.0.to_string());
        kv("input_height", self.input.1.to_string());
        kv("input_width", self.input.2.to_string());
        kv("blocks", format_blocks(&self.blocks));
        kv("init_seed", self.network(1).init_seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("total_iterations", t.total_iterations.to_string());
        kv("stage1_iterations", t.stage1_iterations.to_string());
        kv("lr_stage1", t.lr_stage1.to_string());
        kv("lr_stage2", t.lr_stage2.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("epsilon", t.epsilon.to_string());
        kv("augment", t.augment.to_string());
        kv("max_shift", t.max_shift.to_string());
        kv("k", self.k.to_string());
        kv("strata_key", self.strata_key.clone().unwrap_or_else(|| "none".into()));
        kv("fold_seed", self.fold_seed().to_string());
        kv("level", self.level.to_string());
        kv("threshold", self.threshold.to_string());
        kv("group", self.group.clone().unwrap_or_else(|| "none".into()));
        s
    }
}
