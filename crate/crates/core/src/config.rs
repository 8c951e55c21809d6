//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the target config; a misspelled key is an error, never a silent
//! default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::DecorateMode;
use crate::importance::Ranker;
use crate::model::Architecture;

/// Parses `key = value` lines. Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// A configuration assembled from key/value pairs.
pub trait KeyValueConfig: Default {
    /// `(key, description)` for every accepted key.
    const KEYS: &'static [(&'static str, &'static str)];

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn validate(&self) -> Result<()>;

    fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !Self::KEYS.iter().any(|(known, _)| *known == k) {
                return Err(Error::UnknownKey(k));
            }
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Baseline training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub pool_every: usize,
    /// Plain CNN only: conv-BN-ReLU blocks when set, biased conv-ReLU otherwise.
    pub batch_norm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_low: f32,
    pub lr_high: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Plain,
            widths: vec![16, 32, 32, 64],
            blocks_per_stage: vec![2, 2],
            pool_every: 1,
            batch_norm: true,
            epochs: 12,
            batch_size: 32,
            lr_low: 1e-2,
            lr_high: 1e-1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl KeyValueConfig for TrainConfig {
    const KEYS: &'static [(&'static str, &'static str)] = &[
        ("architecture", "plain | residual"),
        ("widths", "comma-separated conv widths (plain) or stage widths (residual)"),
        ("blocks_per_stage", "comma-separated residual blocks per stage"),
        ("pool_every", "plain CNN: max-pool after every n-th conv block"),
        ("batch_norm", "plain CNN: true for conv-BN-ReLU blocks, false for biased conv-ReLU"),
        ("epochs", "training epochs"),
        ("batch_size", "minibatch size"),
        ("lr_low", "1-cycle start and end learning rate"),
        ("lr_high", "1-cycle peak learning rate"),
        ("momentum", "SGD momentum"),
        ("weight_decay", "SGD weight decay"),
        ("seed", "initialization and shuffling seed"),
    ];

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "architecture" => {
                self.architecture = match v {
                    "plain" => Architecture::Plain,
                    "residual" => Architecture::Residual,
                    _ => return Err(Error::Config(format!("`architecture`: unknown value `{v}`"))),
                }
            }
            "widths" => self.widths = list(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = list(key, v)?,
            "pool_every" => self.pool_every = num(key, v)?,
            "batch_norm" => self.batch_norm = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_low" => self.lr_low = num(key, v)?,
            "lr_high" => self.lr_high = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_low > 0.0 && self.lr_low <= self.lr_high) {
            return Err(Error::Config("need 0 < lr_low <= lr_high".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.architecture == Architecture::Residual && self.blocks_per_stage.len() != self.widths.len() {
            return Err(Error::Config("blocks_per_stage needs one entry per stage width".into()));
        }
        if self.architecture == Architecture::Residual && !self.batch_norm {
            return Err(Error::Config("the residual network always uses batch norm".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pruning pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    OneShot,
    TickOnly,
    TickTock,
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMode::OneShot => "one-shot",
            PruneMode::TickOnly => "tick-only",
            PruneMode::TickTock => "tick-tock",
        })
    }
}

impl std::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-shot" => Ok(PruneMode::OneShot),
            "tick-only" => Ok(PruneMode::TickOnly),
            "tick-tock" => Ok(PruneMode::TickTock),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Data used for each Tick epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetPolicy {
    Full,
    PerClass(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PruneMode,
    pub tick_prune_fraction: f64,
    pub ticks_per_tock: usize,
    pub tock_epochs: usize,
    pub sparse_lambda: f32,
    pub finetune_epochs: usize,
    pub flops_target: f64,
    pub tick_subset: SubsetPolicy,
    pub tick_lr: f32,
    pub cycle_lr_low: f32,
    pub cycle_lr_high: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub min_channels: usize,
    pub tick_train_beta: bool,
    /// `None` picks GBN when every conv has a BN, gated convolution otherwise.
    pub decorate: Option<DecorateMode>,
    pub ranker: Ranker,
    /// Epochs for retraining the pruned architecture from scratch; 0 skips it.
    pub scratch_epochs: usize,
    pub max_ticks: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: PruneMode::TickTock,
            tick_prune_fraction: 0.01,
            ticks_per_tock: 10,
            tock_epochs: 10,
            sparse_lambda: 1e-3,
            finetune_epochs: 40,
            flops_target: 0.6,
            tick_subset: SubsetPolicy::Full,
            tick_lr: 1e-3,
            cycle_lr_low: 1e-3,
            cycle_lr_high: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            min_channels: crate::pruner::DEFAULT_MIN_CHANNELS,
            tick_train_beta: false,
            decorate: None,
            ranker: Ranker::Taylor,
            scratch_epochs: 0,
            max_ticks: 10_000,
            seed: 0,
        }
    }
}

impl KeyValueConfig for PipelineConfig {
    const KEYS: &'static [(&'static str, &'static str)] = &[
        ("mode", "one-shot | tick-only | tick-tock"),
        ("tick_prune_fraction", "fraction of alive filters removed per Tick (rounded up)"),
        ("ticks_per_tock", "Ticks between consecutive Tocks"),
        ("tock_epochs", "epochs per Tock"),
        ("sparse_lambda", "weight of the L1 gate penalty during Tock"),
        ("finetune_epochs", "epochs of final fine-tuning"),
        ("flops_target", "stop pruning at this fraction of baseline FLOPs"),
        ("tick_subset", "full | per-class:<count>"),
        ("tick_lr", "constant learning rate during Tick"),
        ("cycle_lr_low", "1-cycle start and end learning rate for Tock and fine-tune"),
        ("cycle_lr_high", "1-cycle peak learning rate for Tock and fine-tune"),
        ("momentum", "SGD momentum"),
        ("weight_decay", "SGD weight decay (never applied to gates)"),
        ("batch_size", "minibatch size"),
        ("min_channels", "smallest width a layer or group may be pruned to"),
        ("tick_train_beta", "let BN beta train during Tick"),
        ("decorate", "auto | gbn | gated-conv"),
        ("ranker", "taylor | magnitude"),
        ("scratch_epochs", "retrain the pruned architecture from scratch for this many epochs (0 = off)"),
        ("max_ticks", "upper bound on Tick iterations"),
        ("seed", "shuffling seed"),
    ];

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mode" => self.mode = v.parse()?,
            "tick_prune_fraction" => self.tick_prune_fraction = num(key, v)?,
            "ticks_per_tock" => self.ticks_per_tock = num(key, v)?,
            "tock_epochs" => self.tock_epochs = num(key, v)?,
            "sparse_lambda" => self.sparse_lambda = num(key, v)?,
            "finetune_epochs" => self.finetune_epochs = num(key, v)?,
            "flops_target" => self.flops_target = num(key, v)?,
            "tick_subset" => {
                self.tick_subset = match v.split_once(':') {
                    None if v == "full" => SubsetPolicy::Full,
                    Some(("per-class", n)) => SubsetPolicy::PerClass(num(key, n)?),
                    _ => return Err(Error::Config(format!("`tick_subset`: unknown value `{v}`"))),
                }
            }
            "tick_lr" => self.tick_lr = num(key, v)?,
            "cycle_lr_low" => self.cycle_lr_low = num(key, v)?,
            "cycle_lr_high" => self.cycle_lr_high = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "min_channels" => self.min_channels = num(key, v)?,
            "tick_train_beta" => self.tick_train_beta = flag(key, v)?,
            "decorate" => self.decorate = if v == "auto" { None } else { Some(v.parse()?) },
            "ranker" => self.ranker = v.parse()?,
            "scratch_epochs" => self.scratch_epochs = num(key, v)?,
            "max_ticks" => self.max_ticks = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(self.tick_prune_fraction > 0.0 && self.tick_prune_fraction < 1.0) {
            return Err(Error::Config("tick_prune_fraction must lie in (0, 1)".into()));
        }
        if self.ticks_per_tock == 0 {
            return Err(Error::Config("ticks_per_tock must be at least 1".into()));
        }
        if !(self.flops_target > 0.0 && self.flops_target < 1.0) {
            return Err(Error::Config("flops_target must lie in (0, 1)".into()));
        }
        if self.tick_subset == SubsetPolicy::PerClass(0) {
            return Err(Error::Config("tick_subset per-class count must be positive".into()));
        }
        if self.batch_size == 0 || self.min_channels == 0 {
            return Err(Error::Config("batch_size and min_channels must be positive".into()));
        }
        if !(self.tick_lr > 0.0 && self.cycle_lr_low > 0.0 && self.cycle_lr_low <= self.cycle_lr_high) {
            return Err(Error::Config("learning rates must be positive with cycle_lr_low <= cycle_lr_high".into()));
        }
        if !(self.sparse_lambda >= 0.0) {
            return Err(Error::Config("sparse_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn render_train(cfg: &TrainConfig) -> String {
    let arch = match cfg.architecture {
        Architecture::Plain => "plain",
        Architecture::Residual => "residual",
    };
    format!(
        "architecture = {arch}\nwidths = {}\nblocks_per_stage = {}\npool_every = {}\nbatch_norm = {}\nepochs = {}\n\
         batch_size = {}\nlr_low = {}\nlr_high = {}\nmomentum = {}\nweight_decay = {}\nseed = {}\n",
        join(&cfg.widths),
        join(&cfg.blocks_per_stage),
        cfg.pool_every,
        cfg.batch_norm,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr_low,
        cfg.lr_high,
        cfg.momentum,
        cfg.weight_decay,
        cfg.seed,
    )
}

/// Renders a config back to `key = value` text, one line per known key.
pub fn render_pipeline(cfg: &PipelineConfig) -> String {
    let subset = match cfg.tick_subset {
        SubsetPolicy::Full => "full".to_string(),
        SubsetPolicy::PerClass(n) => format!("per-class:{n}"),
    };
    let decorate = cfg.decorate.map_or("auto".to_string(), |d| d.to_string());
    let ranker = cfg.ranker;
    format!(
        "mode = {}\ntick_prune_fraction = {}\nticks_per_tock = {}\ntock_epochs = {}\nsparse_lambda = {}\n\
         finetune_epochs = {}\nflops_target = {}\ntick_subset = {subset}\ntick_lr = {}\ncycle_lr_low = {}\n\
         cycle_lr_high = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\nmin_channels = {}\n\
         tick_train_beta = {}\ndecorate = {decorate}\nranker = {ranker}\nscratch_epochs = {}\nmax_ticks = {}\nseed = {}\n",
        cfg.mode,
        cfg.tick_prune_fraction,
        cfg.ticks_per_tock,
        cfg.tock_epochs,
        cfg.sparse_lambda,
        cfg.finetune_epochs,
        cfg.flops_target,
        cfg.tick_lr,
        cfg.cycle_lr_low,
        cfg.cycle_lr_high,
        cfg.momentum,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.min_channels,
        cfg.tick_train_beta,
        cfg.scratch_epochs,
        cfg.max_ticks,
        cfg.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        match PipelineConfig::from_text("mode = tick-only\nlamda = 0.1\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "lamda"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_values() {
        let cfg = PipelineConfig::from_text(
            "# schedule\nmode = one-shot\ntick_subset = per-class:100\ndecorate = gbn\n\nflops_target=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, PruneMode::OneShot);
        assert_eq!(cfg.tick_subset, SubsetPolicy::PerClass(100));
        assert_eq!(cfg.decorate, Some(DecorateMode::Gbn));
        assert_eq!(cfg.flops_target, 0.5);
        assert_eq!(cfg.ticks_per_tock, 10);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_text("flops_target = 1.5").is_err());
        assert!(PipelineConfig::from_text("ticks_per_tock = 0").is_err());
        assert!(PipelineConfig::from_text("mode = tick").is_err());
        assert!(PipelineConfig::from_text("mode = tick-only\nmode = one-shot").is_err());
        assert!(PipelineConfig::from_text("just words").is_err());
    }

    #[test]
    fn rendered_train_config_parses_back() {
        let cfg = TrainConfig {
            architecture: Architecture::Residual,
            widths: vec![8, 16],
            blocks_per_stage: vec![1, 3],
            lr_high: 0.25,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&render_train(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn rendered_config_parses_back() {
        let cfg = PipelineConfig {
            tick_subset: SubsetPolicy::PerClass(20),
            ranker: Ranker::Magnitude,
            ..PipelineConfig::default()
        };
        assert_eq!(PipelineConfig::from_text(&render_pipeline(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn train_config() {
        let cfg = TrainConfig::from_text("architecture = residual\nwidths = 8,16\nblocks_per_stage = 1,1\n").unwrap();
        assert_eq!(cfg.widths, vec![8, 16]);
        assert!(TrainConfig::from_text("architecture = residual\nwidths = 8,16\nblocks_per_stage = 1").is_err());
        assert!(matches!(TrainConfig::from_text("epoch = 3"), Err(Error::UnknownKey(_))));
    }
}
