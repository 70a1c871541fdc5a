//! Run configuration: a nested TOML file, overridable from the command line
//! with `--set key.path=value`. Every knob a run depends on lives here; the
//! effective merged config is echoed into the run directory and hashed, so a
//! run is reconstructible from its directory alone.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::losses::LossWeights;
use tagalign_core::masking::MaskingPolicy;
use tagalign_core::model::ModelConfig;
use tagalign_core::rng::fnv1a64;
use tagalign_core::scheduler::Regime;
use tagalign_core::tensor::AdamConfig;
use tagalign_core::trainer::PretrainConfig;
use tagalign_core::world::WorldSpec;
use tagalign_core::CoreError;

pub const OUTPUT_ROOT_ENV: &str = "TAGALIGN_OUTPUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training/evaluation randomness (corpus generation uses `world_seed`).
    pub seed: u64,
    /// Seed the synthetic world is generated from.
    pub world_seed: u64,
    /// Run directory; joined under the output root unless absolute.
    pub out_dir: String,
    pub regime: Regime,
    pub tags: TagsSection,
    pub world: WorldSpec,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleSection,
    pub masking: MaskingPolicy,
    pub loss_weights: LossWeights,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TagsSection {
    pub enabled: bool,
}

impl Default for TagsSection {
    fn default() -> Self {
        TagsSection { enabled: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Directory corpora are generated into / read from; joined under the
    /// output root unless absolute.
    pub dir: String,
    pub text_count: usize,
    pub image_count: usize,
    pub pair_count: usize,
    pub eval_pair_count: usize,
    pub extra_image_count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            dir: "corpora".into(),
            text_count: 1000,
            image_count: 1000,
            pair_count: 800,
            eval_pair_count: 48,
            extra_image_count: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            max_positions: 64,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub match_enabled: bool,
    pub pairing_enabled: bool,
    pub mismatch_prob: f64,
    /// Write a checkpoint after every epoch (final.ckpt is always written).
    pub checkpoint_every_epoch: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 30,
            batch_size: 32,
            match_enabled: true,
            pairing_enabled: true,
            mismatch_prob: 0.5,
            checkpoint_every_epoch: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub task: Task,
    pub steps: u64,
    pub batch_size: usize,
    pub negatives: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Pretrained checkpoint to start from; empty = fresh init (Base).
    pub checkpoint: String,
    /// Retrieval: cap on pairs drawn from the paired corpus (0 = all).
    pub max_pairs: usize,
    /// Referring: size of the fixed fine-tuning instance set.
    pub referring_instances: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            task: Task::Retrieval,
            steps: 1200,
            batch_size: 8,
            negatives: 2,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            checkpoint: String::new(),
            max_pairs: 0,
            referring_instances: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Referring,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::Referring => "referring",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub task: Task,
    /// Checkpoint to evaluate; empty = fresh init.
    pub checkpoint: String,
    pub referring_instances: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            task: Task::Retrieval,
            checkpoint: String::new(),
            referring_instances: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub per_class: usize,
    pub max_draws: usize,
    pub checkpoint: String,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            per_class: 50,
            max_draws: 4000,
            checkpoint: String::new(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world_seed: 42,
            out_dir: "run".into(),
            regime: Regime::W,
            tags: TagsSection::default(),
            world: WorldSpec::default(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            optimizer: AdamConfig::default(),
            schedule: ScheduleSection::default(),
            masking: MaskingPolicy::default(),
            loss_weights: LossWeights::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    /// Every offending key, reported together.
    Invalid(Vec<String>),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "config io: {m}"),
            ConfigError::Parse(m) => write!(f, "config parse: {m}"),
            ConfigError::Invalid(keys) => {
                writeln!(f, "invalid config ({} problems):", keys.len())?;
                for k in keys {
                    writeln!(f, "  - {k}")?;
                }
                Ok(())
            }
        }
    }
}

impl RunConfig {
    /// Load from a TOML file (or defaults when `path` is None), apply
    /// `--set key.path=value` overrides, then validate. Unknown keys and
    /// semantic violations are all reported at once.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }

        // unknown keys: walk the user tree against the full schema tree
        let schema = toml::Value::try_from(RunConfig::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut problems = Vec::new();
        collect_unknown_keys(&value, &schema, String::new(), &mut problems);
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }

        let config: RunConfig = value
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }

    /// All semantic violations at once.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut check = |r: Result<(), CoreError>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.world.validate());
        check(self.masking.validate());
        check(self.model_config().validate());
        check(self.pretrain_config().validate());
        if self.corpus.dir.is_empty() {
            problems.push("corpus.dir must not be empty".into());
        }
        if self.out_dir.is_empty() {
            problems.push("out_dir must not be empty".into());
        }
        if self.finetune.negatives == 0 {
            problems.push("finetune.negatives must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        // vocab size is world-derived; validation uses a placeholder of 1+
        let vocab_size = 3
            + self.world.num_classes * if self.world.synonyms { 2 } else { 1 }
            + self.world.num_filler_words;
        ModelConfig {
            vocab_size,
            f_dim: self.world.f_dim,
            num_detector_classes: self.world.num_classes,
            encoder: EncoderConfig {
                layers: self.model.layers,
                heads: self.model.heads,
                hidden_dim: self.model.hidden_dim,
                ffn_dim: self.model.ffn_dim,
                max_positions: self.model.max_positions,
            },
            init_std: self.model.init_std,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            regime: self.regime,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            peak_lr: self.schedule.peak_lr,
            warmup_fraction: self.schedule.warmup_fraction,
            adam: self.optimizer,
            masking: self.masking,
            weights: self.loss_weights,
            tags_enabled: self.tags.enabled,
            match_enabled: self.pretrain.match_enabled,
            pairing_enabled: self.pretrain.pairing_enabled,
            mismatch_prob: self.pretrain.mismatch_prob,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> tagalign_core::finetune::FinetuneConfig {
        tagalign_core::finetune::FinetuneConfig {
            steps: self.finetune.steps,
            batch_size: self.finetune.batch_size,
            negatives: self.finetune.negatives,
            peak_lr: self.finetune.peak_lr,
            warmup_fraction: self.finetune.warmup_fraction,
            adam: self.optimizer,
            tags_enabled: self.tags.enabled,
            seed: self.seed,
        }
    }

    /// Canonical serialized form; what gets echoed and hashed.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of every effective setting. `out_dir` is excluded: it is where
    /// results land, not a setting that changes them, and reruns must be able
    /// to reproduce a report hash from a fresh directory.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.out_dir = String::new();
        fnv1a64(canonical.echo().as_bytes())
    }

    pub fn output_root() -> PathBuf {
        match std::env::var(OUTPUT_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("runs"),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.out_dir);
        if p.is_absolute() {
            p
        } else {
            Self::output_root().join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.corpus.dir);
        if p.is_absolute() {
            p
        } else {
            Self::output_root().join(p)
        }
    }
}

fn apply_override(value: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("--set needs key.path=value, got `{entry}`")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(raw.to_string()), // bare strings need no quotes
    };
    let mut node = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("--set {path}: `{part}` is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("non-empty key path")
}

fn collect_unknown_keys(
    value: &toml::Value,
    schema: &toml::Value,
    prefix: String,
    problems: &mut Vec<String>,
) {
    let (Some(user), Some(known)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    for (key, sub) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            None => problems.push(format!("unknown key `{path}`")),
            Some(schema_sub) => collect_unknown_keys(sub, schema_sub, path, problems),
        }
    }
}
