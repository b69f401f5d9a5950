//! Experiment configuration: TOML in, validated and normalised config out.
//!
//! Every key has a default except `domain.strategy`. Relative paths are
//! resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use selfreeze_core::data::SyntheticSpec;
use selfreeze_core::importance::{EstimatorKind, Granularity, PartitionCriterion};
use selfreeze_core::model::{ModelConfig, TinyLm};
use selfreeze_core::training::{OptimizerConfig, OptimizerKind, Strategy};

use crate::error::{CliError, Result};

pub const NORMALIZED_CONFIG_FILE: &str = "config.normalized.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Label carried into every metrics row.
    pub run_id: String,
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub general: GeneralConfig,
    pub importance: ImportanceConfig,
    pub domain: DomainConfig,
    pub matrix: MatrixConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Initial weights.
    pub model: u64,
    /// Corpus sampling; the domain corpus and the choice items derive from it.
    pub data: u64,
    /// Batch order in both stages.
    pub train: u64,
    /// Adapter initialisation.
    pub lora: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory written by `gen-data`; when unset the corpora are generated in memory.
    pub dir: Option<PathBuf>,
    pub general_size: usize,
    pub domain_size: usize,
    /// Weight of the domain-specific chain in the domain mixture, in (0, 1].
    pub skew: f64,
    /// Multiple-choice items per task.
    pub choice_items: usize,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    /// Load the general-stage model from this checkpoint instead of training it.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceOver {
    /// Score the general model's own weights.
    Base,
    /// Attach adapters, train them on the general task, and score the adapters.
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    pub estimator: EstimatorKind,
    /// Target core fraction; θ becomes the matching score quantile.
    pub rho: Option<f64>,
    /// Fixed θ; exclusive with `rho`.
    pub threshold: Option<f64>,
    pub granularity: Granularity,
    pub over: ImportanceOver,
    /// Per-sample gradients used by the gradient and Fisher estimators.
    pub max_samples: usize,
    /// ξ for the path-integral estimator.
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectiveMode {
    /// Core scalars frozen.
    Hard,
    /// Nothing frozen; importance-weighted pull towards the general weights.
    Soft,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Defaults to every block weight.
    pub targets: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    /// One of base, full, lora_mu, lora_nu_mu, ewclora, rslora, selective. Required.
    pub strategy: Option<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub selective_mode: SelectiveMode,
    /// λ of the soft selective penalty.
    pub soft_lambda: f64,
    /// λ of the ewclora penalty.
    pub ewc_lambda: f64,
    pub lora: LoraConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub strategies: Vec<String>,
    /// Run strategies on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Defaults to `runs/<run_id>` beside the config file.
    pub dir: Option<PathBuf>,
    /// Fill `wall_ms` in metrics rows. Off by default so reruns stay byte-identical.
    pub record_timing: bool,
    /// Training stops and flushes a checkpoint once this file exists.
    pub stop_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            seeds: Seeds::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            general: GeneralConfig::default(),
            importance: ImportanceConfig::default(),
            domain: DomainConfig::default(),
            matrix: MatrixConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 7,
            data: 1,
            train: 11,
            lora: 3,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            general_size: 2000,
            domain_size: 1000,
            skew: 0.7,
            choice_items: 200,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl Default for GeneralConfig {
    fn default() -> Self {
        GeneralConfig {
            epochs: 5,
            lr: 0.01,
            batch_size: 20,
            optimizer: OptimizerKind::Adam,
            clip_norm: None,
            init_checkpoint: None,
        }
    }
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            estimator: EstimatorKind::Gradient,
            rho: None,
            threshold: None,
            granularity: Granularity::Scalar,
            over: ImportanceOver::Base,
            max_samples: 500,
            damping: selfreeze_core::importance::DEFAULT_SI_DAMPING,
        }
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            targets: None,
        }
    }
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            strategy: None,
            epochs: 5,
            lr: 8e-4,
            batch_size: 20,
            optimizer: OptimizerKind::Adam,
            clip_norm: None,
            selective_mode: SelectiveMode::Hard,
            soft_lambda: 1.0,
            ewc_lambda: 10.0,
            lora: LoraConfig::default(),
        }
    }
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            strategies: Strategy::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            parallel: false,
        }
    }
}

pub const DATA_FILES: [&str; 6] = [
    "general.train.txt",
    "general.eval.txt",
    "domain.train.txt",
    "domain.eval.txt",
    "general.choices.json",
    "domain.choices.json",
];

fn optimizer(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>) -> OptimizerConfig {
    OptimizerConfig {
        kind,
        lr,
        clip_norm,
        ..OptimizerConfig::default()
    }
}

impl ExperimentConfig {
    /// The configured strategy. Only valid on a validated config.
    pub fn strategy(&self) -> Strategy {
        self.domain
            .strategy
            .as_deref()
            .and_then(|s| s.parse().ok())
            .expect("validated config has a strategy")
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        let mut c = self.clone();
        c.domain.strategy = Some(strategy.as_str().to_string());
        c
    }

    pub fn criterion(&self) -> PartitionCriterion {
        match (self.importance.threshold, self.importance.rho) {
            (Some(t), _) => PartitionCriterion::Threshold(t),
            (None, Some(r)) => PartitionCriterion::TopFraction(r),
            (None, None) => PartitionCriterion::TopFraction(0.1),
        }
    }

    pub fn general_optimizer(&self) -> OptimizerConfig {
        optimizer(self.general.optimizer, self.general.lr, self.general.clip_norm)
    }

    pub fn domain_optimizer(&self) -> OptimizerConfig {
        optimizer(self.domain.optimizer, self.domain.lr, self.domain.clip_norm)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.run_id))
    }

    pub fn lora_targets(&self) -> Vec<String> {
        match &self.domain.lora.targets {
            Some(t) => t.clone(),
            None => (0..self.model.depth)
                .flat_map(|b| {
                    [
                        selfreeze_core::model::block_param(b, "fc1", "weight"),
                        selfreeze_core::model::block_param(b, "fc2", "weight"),
                    ]
                })
                .collect(),
        }
    }

    /// The blocks that must agree for two runs to be comparable.
    pub fn shared_fingerprint(&self) -> Vec<(&'static str, String)> {
        let dbg = |v: &dyn std::fmt::Debug| format!("{v:?}");
        vec![
            ("seeds", dbg(&self.seeds)),
            ("model", dbg(&self.model)),
            ("data", dbg(&self.data)),
            ("general", dbg(&self.general)),
        ]
    }

    /// Checks every constraint and fills defaults that depend on other keys.
    /// All violations are reported together.
    pub fn validate(mut self) -> Result<Self> {
        let mut errs = Vec::new();

        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c)) {
            errs.push(format!("run_id {:?} must be non-empty and use only [A-Za-z0-9_.-]", self.run_id));
        }
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {}", strip_prefix(&e)));
        }

        let d = &self.data;
        let alphabet = d.synthetic.alphabet.chars().count();
        if d.dir.is_none() && alphabet != self.model.vocab_size {
            errs.push(format!(
                "model.vocab_size is {} but data.synthetic.alphabet has {alphabet} symbols",
                self.model.vocab_size
            ));
        }
        if d.synthetic.seq_len <= self.model.context {
            errs.push(format!(
                "data.synthetic.seq_len ({}) must exceed model.context ({})",
                d.synthetic.seq_len, self.model.context
            ));
        }
        if d.synthetic.prompt_len == 0 || d.synthetic.continuation_len == 0 {
            errs.push("data.synthetic.prompt_len and continuation_len must be >= 1".into());
        } else if d.synthetic.prompt_len + d.synthetic.continuation_len > self.model.context + 1 {
            errs.push("data.synthetic prompt_len + continuation_len must be <= model.context + 1".into());
        }
        for (key, v) in [("general_size", d.general_size), ("domain_size", d.domain_size)] {
            if v < 2 {
                errs.push(format!("data.{key} must be >= 2, got {v}"));
            }
        }
        if !(d.skew > 0.0 && d.skew <= 1.0) {
            errs.push(format!("data.skew must be in (0, 1], got {}", d.skew));
        }
        if let Some(dir) = &d.dir {
            for f in DATA_FILES {
                if !dir.join(f).is_file() {
                    errs.push(format!("data.dir: missing {}", dir.join(f).display()));
                }
            }
        }

        let g = &self.general;
        check_stage("general", g.lr, g.batch_size, g.clip_norm, &mut errs);
        if let Some(p) = &g.init_checkpoint {
            if !p.is_file() {
                errs.push(format!("general.init_checkpoint {} does not exist", p.display()));
            }
        }

        let imp = &mut self.importance;
        match (imp.rho, imp.threshold) {
            (Some(_), Some(_)) => errs.push("importance.rho and importance.threshold are mutually exclusive".into()),
            (Some(r), None) if !(0.0..=1.0).contains(&r) => {
                errs.push(format!("importance.rho must be in [0, 1], got {r}"))
            }
            (None, Some(t)) if t.is_nan() => errs.push("importance.threshold is NaN".into()),
            (None, None) => imp.rho = Some(0.1),
            _ => {}
        }
        if imp.max_samples == 0 {
            errs.push("importance.max_samples must be >= 1".into());
        }
        if !(imp.damping > 0.0 && imp.damping.is_finite()) {
            errs.push(format!("importance.damping must be > 0, got {}", imp.damping));
        }

        let dm = &self.domain;
        match &dm.strategy {
            None => errs.push("domain.strategy is required".into()),
            Some(s) => {
                if let Err(e) = s.parse::<Strategy>() {
                    errs.push(format!("domain.strategy: {}", strip_prefix(&e)));
                }
            }
        }
        check_stage("domain", dm.lr, dm.batch_size, dm.clip_norm, &mut errs);
        for (key, v) in [("soft_lambda", dm.soft_lambda), ("ewc_lambda", dm.ewc_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("domain.{key} must be finite and >= 0, got {v}"));
            }
        }
        if !(dm.lora.alpha > 0.0 && dm.lora.alpha.is_finite()) {
            errs.push(format!("domain.lora.alpha must be > 0, got {}", dm.lora.alpha));
        }
        if dm.lora.rank == 0 {
            errs.push("domain.lora.rank must be >= 1".into());
        }
        if self.model.validate().is_ok() {
            if let Ok(m) = TinyLm::build(&self.model, 0) {
                let targets = self.lora_targets();
                if targets.is_empty() {
                    errs.push("domain.lora.targets is empty".into());
                }
                for t in &targets {
                    match m.registry().get(t).and_then(|w| w.dims2()) {
                        None => errs.push(format!("domain.lora.targets: {t} is not a weight matrix of the model")),
                        Some((r, c)) if dm.lora.rank > r.min(c) => errs.push(format!(
                            "domain.lora.rank {} exceeds the smaller dimension of {t} ({r}x{c})",
                            dm.lora.rank
                        )),
                        _ => {}
                    }
                }
            }
        }

        let mut seen = Vec::new();
        if self.matrix.strategies.is_empty() {
            errs.push("matrix.strategies is empty".into());
        }
        for s in &self.matrix.strategies {
            match s.parse::<Strategy>() {
                Ok(st) if seen.contains(&st) => errs.push(format!("matrix.strategies lists {s} twice")),
                Ok(st) => seen.push(st),
                Err(e) => errs.push(format!("matrix.strategies: {}", strip_prefix(&e))),
            }
        }

        if self.output.dir.is_none() {
            self.output.dir = Some(self.out_dir());
        }

        if errs.is_empty() {
            Ok(self)
        } else {
            Err(CliError::Config(errs))
        }
    }

    /// Relative paths become relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.general.init_checkpoint);
        fix(&mut self.output.stop_file);
        if self.output.dir.is_none() {
            self.output.dir = Some(PathBuf::from("runs").join(&self.run_id));
        }
        fix(&mut self.output.dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))
    }
}

fn check_stage(stage: &str, lr: f64, batch_size: usize, clip: Option<f64>, errs: &mut Vec<String>) {
    if !(lr > 0.0 && lr.is_finite()) {
        errs.push(format!("{stage}.lr must be > 0, got {lr}"));
    }
    if batch_size == 0 {
        errs.push(format!("{stage}.batch_size must be >= 1"));
    }
    if let Some(c) = clip {
        if !(c > 0.0 && c.is_finite()) {
            errs.push(format!("{stage}.clip_norm must be > 0, got {c}"));
        }
    }
}

fn strip_prefix(e: &dyn std::fmt::Display) -> String {
    let s = e.to_string();
    s.strip_prefix("config error: ").map(str::to_string).unwrap_or(s)
}

/// Parses TOML text; `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim_end().to_string()))?;
    cfg.resolve_paths(base);
    cfg.validate()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Writes the normalised config beside the outputs.
pub fn write_normalized(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(NORMALIZED_CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("/tmp/cfg"))
    }

    fn messages(r: Result<ExperimentConfig>) -> Vec<String> {
        match r {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("[domain]\nstrategy = \"selective\"\n").unwrap();
        assert_eq!(c.strategy(), Strategy::Selective);
        assert_eq!(c.importance.rho, Some(0.1));
        assert_eq!(c.domain.lr, 8e-4);
        assert_eq!(c.domain.batch_size, 20);
        assert_eq!(c.domain.lora.rank, 8);
        assert_eq!(c.domain.lora.alpha, 32.0);
        assert_eq!(c.output.dir, Some(PathBuf::from("/tmp/cfg/runs/run")));
        // the normalised echo parses back to the same config
        let again = parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_strategy_is_named() {
        let m = messages(parse(""));
        assert!(m.iter().any(|s| s.contains("domain.strategy is required")), "{m:?}");
    }

    #[test]
    fn errors_are_aggregated() {
        let m = messages(parse(
            "[importance]\nrho = 1.3\n[domain]\nstrategy = \"selective\"\nlr = -1.0\n[data]\nskew = 0.0\n",
        ));
        assert!(m.iter().any(|s| s.contains("importance.rho must be in [0, 1], got 1.3")), "{m:?}");
        assert!(m.iter().any(|s| s.contains("domain.lr")));
        assert!(m.iter().any(|s| s.contains("data.skew")));
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn unknown_key_and_strategy() {
        assert!(messages(parse("[domain]\nstrategy = \"selective\"\nbogus = 1\n"))[0].contains("bogus"));
        let m = messages(parse("[domain]\nstrategy = \"lora\"\n"));
        assert!(m[0].contains("unknown strategy"));
    }

    #[test]
    fn cross_field_checks() {
        let m = messages(parse(
            "[model]\ncontext = 40\n[importance]\nrho = 0.2\nthreshold = 0.5\n[domain]\nstrategy = \"rslora\"\n[domain.lora]\nrank = 64\n",
        ));
        assert!(m.iter().any(|s| s.contains("seq_len")));
        assert!(m.iter().any(|s| s.contains("mutually exclusive")));
        assert!(m.iter().any(|s| s.contains("exceeds the smaller dimension")));
    }
}
