//! Experiment configuration files.
//!
//! TOML with a handful of top-level keys and the sections `[model]`,
//! `[data]`, `[training]`, `[partition]`, `[attack]` and `[defense]`. Every
//! key except the attack section has a default; unknown keys are rejected.
//! See `configs/` in the repository for complete examples.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, ReportedCountPolicy};
use crate::data::PartitionPlan;
use crate::defense::{ClipBound, DefensePolicy};
use crate::model::{Architecture, ModelSpec, TrainingConfig};

pub const DEFAULT_NUM_CLASSES: usize = 10;
pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 600;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_NUM_ROUNDS: usize = 100;
pub const DEFAULT_NUM_CLIENTS: usize = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 0.2;
pub const DEFAULT_LOCAL_EPOCHS: usize = 2;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_TARGET_CLASSES: [usize; 2] = [0, 1];
pub const DEFAULT_OUTLIER_MULTIPLIER: f64 = 3.0;

/// A rejected configuration, naming the offending key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { samples_per_class: usize },
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Stratified share of the pool held out for evaluation.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    /// Its seed always equals [`ExperimentConfig::seed`].
    pub training: TrainingConfig,
    pub data: DataConfig,
    /// Its seed always equals [`ExperimentConfig::seed`].
    pub partition: PartitionPlan,
    pub num_rounds: usize,
    pub num_malicious: usize,
    pub attack: Option<AttackConfig>,
    pub defense: DefensePolicy,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.partition.seed = seed;
    }

    pub fn num_honest(&self) -> usize {
        self.partition.num_clients - self.num_malicious
    }

    /// Parses a file; relative paths inside it resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("experiment");
        Ok(parse_config(&text, base, stem)?)
    }

    /// Serializes every resolved value, defaults included.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig::from(self);
        toml::to_string(&raw).expect("config is serializable")
    }
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_malicious: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    partition: RawPartition,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack: Option<RawAttack>,
    #[serde(default)]
    defense: RawDefense,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    architecture: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    #[serde(skip_serializing_if = "Option::is_none")]
    samples_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    #[serde(skip_serializing_if = "Option::is_none")]
    num_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unfair_set_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_classes: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawCount {
    Policy(String),
    Fixed(usize),
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    #[serde(skip_serializing_if = "Option::is_none")]
    start_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reported_count: Option<RawCount>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimated_honest_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimated_count_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_to_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_mixture: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawBound {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDefense {
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound: Option<RawBound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold_multiplier: Option<f64>,
}

impl From<&ExperimentConfig> for RawConfig {
    fn from(cfg: &ExperimentConfig) -> Self {
        let (architecture, hidden_sizes) = match &cfg.model.architecture {
            Architecture::SoftmaxRegression => ("softmax_regression", None),
            Architecture::Mlp { hidden_sizes } => ("mlp", Some(hidden_sizes.clone())),
        };
        let (samples_per_class, csv) = match &cfg.data.source {
            DataSource::Synthetic { samples_per_class } => (Some(*samples_per_class), None),
            DataSource::Csv { path } => (None, Some(path.clone())),
        };
        let defense = match cfg.defense {
            DefensePolicy::None => RawDefense {
                kind: Some("none".into()),
                ..RawDefense::default()
            },
            DefensePolicy::Clip(bound) => RawDefense {
                kind: Some("clip".into()),
                bound: Some(match bound {
                    ClipBound::Fixed(b) => RawBound::Fixed(b),
                    ClipBound::AdaptiveMedian => RawBound::Named("adaptive_median".into()),
                }),
                threshold_multiplier: None,
            },
            DefensePolicy::FlagOutliers {
                threshold_multiplier,
            } => RawDefense {
                kind: Some("flag_outliers".into()),
                bound: None,
                threshold_multiplier: Some(threshold_multiplier),
            },
        };
        RawConfig {
            name: Some(cfg.name.clone()),
            seed: Some(cfg.seed),
            num_rounds: Some(cfg.num_rounds),
            num_malicious: Some(cfg.num_malicious),
            output_dir: Some(cfg.output_dir.clone()),
            model: RawModel {
                architecture: Some(architecture.into()),
                hidden_sizes,
                input_dim: Some(cfg.model.input_dim),
                num_classes: Some(cfg.model.num_classes),
            },
            data: RawData {
                samples_per_class,
                csv,
                test_fraction: Some(cfg.data.test_fraction),
            },
            training: RawTraining {
                learning_rate: Some(cfg.training.learning_rate),
                local_epochs: Some(cfg.training.local_epochs),
                batch_size: Some(cfg.training.batch_size),
            },
            partition: RawPartition {
                num_clients: Some(cfg.partition.num_clients),
                samples_per_client: Some(cfg.partition.samples_per_client),
                unfair_set_size: Some(cfg.partition.unfair_set_size),
                target_classes: Some(cfg.partition.target_classes.iter().copied().collect()),
            },
            attack: cfg.attack.as_ref().map(|a| RawAttack {
                start_round: Some(a.attack_start_round),
                reported_count: Some(match a.reported_count_policy {
                    ReportedCountPolicy::MatchHonestEstimate => {
                        RawCount::Policy("match_honest_estimate".into())
                    }
                    ReportedCountPolicy::Fixed(n0) => RawCount::Fixed(n0),
                }),
                estimated_honest_clients: Some(a.estimated_honest_clients),
                estimated_count_per_client: Some(a.estimated_count_per_client),
                clip_to_norm: a.clip_to_norm,
                target_mixture: Some(a.target_mixture),
            }),
            defense,
        }
    }
}

fn positive(key: &str, value: Option<usize>, default: usize) -> Result<usize, ConfigError> {
    match value.unwrap_or(default) {
        0 => Err(ConfigError::new(key, "must be at least 1")),
        v => Ok(v),
    }
}

/// One clean set's worth of rows, capped at 90% of the target-class rows
/// the clean sets are expected to hold between them.
fn default_unfair_set_size(
    clients: usize,
    per_client: usize,
    targets: usize,
    classes: usize,
) -> usize {
    let expected_target_rows = (clients * per_client * targets) as f64 / classes as f64;
    per_client.min((0.9 * expected_target_rows) as usize).max(1)
}

/// Pulls the field name out of serde's "unknown field `x`" message.
fn key_from_toml_error(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .unwrap_or("<file>")
        .to_string()
}

/// Parses and validates a configuration. `base_dir` anchors relative data
/// paths; `default_name` names the experiment when the file does not.
pub fn parse_config(
    text: &str,
    base_dir: &Path,
    default_name: &str,
) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| ConfigError::new(key_from_toml_error(&e), e.message().to_string()))?;

    let name = raw.name.unwrap_or_else(|| default_name.to_string());
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(ConfigError::new(
            "name",
            "must be non-empty and contain no path separators",
        ));
    }
    let seed = raw.seed.unwrap_or(0);

    let num_classes = positive(
        "model.num_classes",
        raw.model.num_classes,
        DEFAULT_NUM_CLASSES,
    )?;
    if num_classes < 2 {
        return Err(ConfigError::new(
            "model.num_classes",
            "need at least 2 classes",
        ));
    }
    let input_dim = positive("model.input_dim", raw.model.input_dim, DEFAULT_INPUT_DIM)?;
    let architecture =
        match (
            raw.model
                .architecture
                .as_deref()
                .unwrap_or("softmax_regression"),
            raw.model.hidden_sizes,
        ) {
            ("softmax_regression", None) => Architecture::SoftmaxRegression,
            ("softmax_regression", Some(_)) => {
                return Err(ConfigError::new(
                    "model.hidden_sizes",
                    "only valid with architecture = \"mlp\"",
                ))
            }
            ("mlp", Some(h)) if !h.is_empty() && !h.contains(&0) => {
                Architecture::Mlp { hidden_sizes: h }
            }
            ("mlp", _) => {
                return Err(ConfigError::new(
                    "model.hidden_sizes",
                    "mlp needs a non-empty list of positive layer widths",
                ))
            }
            (other, _) => return Err(ConfigError::new(
                "model.architecture",
                format!(
                    "unknown architecture {other:?}; expected \"softmax_regression\" or \"mlp\""
                ),
            )),
        };
    let model = ModelSpec::new(architecture, input_dim, num_classes)
        .map_err(|e| ConfigError::new("model", e.to_string()))?;

    let test_fraction = raw.data.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ConfigError::new(
            "data.test_fraction",
            "must lie strictly between 0 and 1",
        ));
    }
    let source = match (raw.data.csv, raw.data.samples_per_class) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "data.samples_per_class",
                "cannot be combined with data.csv",
            ))
        }
        (Some(path), None) => DataSource::Csv {
            path: if path.is_absolute() {
                path
            } else {
                base_dir.join(path)
            },
        },
        (None, spc) => DataSource::Synthetic {
            samples_per_class: positive("data.samples_per_class", spc, DEFAULT_SAMPLES_PER_CLASS)?,
        },
    };

    let learning_rate = raw.training.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE);
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(ConfigError::new(
            "training.learning_rate",
            "must be a positive real",
        ));
    }
    let training = TrainingConfig {
        learning_rate,
        local_epochs: positive(
            "training.local_epochs",
            raw.training.local_epochs,
            DEFAULT_LOCAL_EPOCHS,
        )?,
        batch_size: positive(
            "training.batch_size",
            raw.training.batch_size,
            DEFAULT_BATCH_SIZE,
        )?,
        seed,
    };

    let num_clients = positive(
        "partition.num_clients",
        raw.partition.num_clients,
        DEFAULT_NUM_CLIENTS,
    )?;
    let train_pool = match &source {
        DataSource::Synthetic { samples_per_class } => {
            let held = (test_fraction * *samples_per_class as f64).round() as usize;
            Some(num_classes * (samples_per_class - held))
        }
        DataSource::Csv { .. } => None,
    };
    let samples_per_client = match (raw.partition.samples_per_client, train_pool) {
        (Some(0), _) => {
            return Err(ConfigError::new(
                "partition.samples_per_client",
                "must be at least 1",
            ))
        }
        (Some(s), Some(pool)) if s * num_clients > pool => {
            return Err(ConfigError::new(
                "partition.samples_per_client",
                format!("{num_clients} clients x {s} samples exceeds the {pool}-row training pool"),
            ))
        }
        (Some(s), _) => s,
        (None, Some(pool)) if pool / num_clients > 0 => pool / num_clients,
        (None, Some(pool)) => {
            return Err(ConfigError::new(
                "partition.num_clients",
                format!("{num_clients} clients cannot share a {pool}-row training pool"),
            ))
        }
        (None, None) => {
            return Err(ConfigError::new(
                "partition.samples_per_client",
                "required when data.csv is set",
            ))
        }
    };
    let target_classes: BTreeSet<usize> = raw
        .partition
        .target_classes
        .unwrap_or_else(|| DEFAULT_TARGET_CLASSES.to_vec())
        .into_iter()
        .collect();
    crate::data::validate_target_classes(&target_classes, num_classes)
        .map_err(|e| ConfigError::new("partition.target_classes", e.to_string()))?;
    let partition = PartitionPlan {
        num_clients,
        samples_per_client,
        unfair_set_size: positive(
            "partition.unfair_set_size",
            raw.partition.unfair_set_size,
            default_unfair_set_size(
                num_clients,
                samples_per_client,
                target_classes.len(),
                num_classes,
            ),
        )?,
        target_classes: target_classes.clone(),
        seed,
    };

    let num_rounds = positive("num_rounds", raw.num_rounds, DEFAULT_NUM_ROUNDS)?;
    let num_malicious = raw
        .num_malicious
        .unwrap_or(usize::from(raw.attack.is_some()));
    if 2 * num_malicious >= num_clients {
        return Err(ConfigError::new(
            "num_malicious",
            format!(
                "{num_malicious} of {num_clients} clients is not a non-majority; \
                 need num_malicious < num_clients / 2"
            ),
        ));
    }
    let attack = match (raw.attack, num_malicious) {
        (Some(_), 0) => {
            return Err(ConfigError::new(
                "attack",
                "attack section given but num_malicious = 0",
            ))
        }
        (None, n) if n > 0 => {
            return Err(ConfigError::new(
                "num_malicious",
                "malicious clients need an [attack] section",
            ))
        }
        (None, _) => None,
        (Some(a), _) => Some(parse_attack(a, &partition, num_clients - num_malicious)?),
    };

    let defense = parse_defense(raw.defense)?;

    let output_dir = raw
        .output_dir
        .map(|p| if p.is_absolute() { p } else { base_dir.join(p) })
        .unwrap_or_else(|| base_dir.join("runs").join(&name));

    Ok(ExperimentConfig {
        name,
        model,
        training,
        data: DataConfig {
            source,
            test_fraction,
        },
        partition,
        num_rounds,
        num_malicious,
        attack,
        defense,
        seed,
        output_dir,
    })
}

fn parse_attack(
    raw: RawAttack,
    partition: &PartitionPlan,
    honest: usize,
) -> Result<AttackConfig, ConfigError> {
    let reported_count_policy = match raw.reported_count {
        None => ReportedCountPolicy::MatchHonestEstimate,
        Some(RawCount::Policy(p)) if p == "match_honest_estimate" => {
            ReportedCountPolicy::MatchHonestEstimate
        }
        Some(RawCount::Policy(p)) => {
            return Err(ConfigError::new(
                "attack.reported_count",
                format!("expected \"match_honest_estimate\" or a positive integer, got {p:?}"),
            ))
        }
        Some(RawCount::Fixed(0)) => {
            return Err(ConfigError::new(
                "attack.reported_count",
                "must be at least 1",
            ))
        }
        Some(RawCount::Fixed(n)) => ReportedCountPolicy::Fixed(n),
    };
    if let Some(c) = raw.clip_to_norm {
        if c.is_nan() || c <= 0.0 {
            return Err(ConfigError::new("attack.clip_to_norm", "must be positive"));
        }
    }
    let target_mixture = raw.target_mixture.unwrap_or(0.0);
    if !(0.0..1.0).contains(&target_mixture) {
        return Err(ConfigError::new(
            "attack.target_mixture",
            "must be in [0, 1)",
        ));
    }
    Ok(AttackConfig {
        target_classes: partition.target_classes.clone(),
        attack_start_round: raw.start_round.unwrap_or(0),
        reported_count_policy,
        estimated_honest_clients: positive(
            "attack.estimated_honest_clients",
            raw.estimated_honest_clients,
            honest,
        )?,
        estimated_count_per_client: positive(
            "attack.estimated_count_per_client",
            raw.estimated_count_per_client,
            partition.samples_per_client,
        )?,
        clip_to_norm: raw.clip_to_norm,
        target_mixture,
    })
}

fn parse_defense(raw: RawDefense) -> Result<DefensePolicy, ConfigError> {
    let kind = raw.kind.as_deref().unwrap_or("none");
    let policy = match kind {
        "none" => {
            if raw.bound.is_some() {
                return Err(ConfigError::new(
                    "defense.bound",
                    "only valid with kind = \"clip\"",
                ));
            }
            if raw.threshold_multiplier.is_some() {
                return Err(ConfigError::new(
                    "defense.threshold_multiplier",
                    "only valid with kind = \"flag_outliers\"",
                ));
            }
            DefensePolicy::None
        }
        "clip" => {
            if raw.threshold_multiplier.is_some() {
                return Err(ConfigError::new(
                    "defense.threshold_multiplier",
                    "only valid with kind = \"flag_outliers\"",
                ));
            }
            match raw.bound {
                None => DefensePolicy::Clip(ClipBound::AdaptiveMedian),
                Some(RawBound::Named(n)) if n == "adaptive_median" => {
                    DefensePolicy::Clip(ClipBound::AdaptiveMedian)
                }
                Some(RawBound::Fixed(b)) if b > 0.0 && b.is_finite() => {
                    DefensePolicy::Clip(ClipBound::Fixed(b))
                }
                Some(_) => {
                    return Err(ConfigError::new(
                        "defense.bound",
                        "expected a positive number or \"adaptive_median\"",
                    ))
                }
            }
        }
        "flag_outliers" => {
            if raw.bound.is_some() {
                return Err(ConfigError::new(
                    "defense.bound",
                    "only valid with kind = \"clip\"",
                ));
            }
            let m = raw
                .threshold_multiplier
                .unwrap_or(DEFAULT_OUTLIER_MULTIPLIER);
            if !(m > 1.0 && m.is_finite()) {
                return Err(ConfigError::new(
                    "defense.threshold_multiplier",
                    "must be greater than 1",
                ));
            }
            DefensePolicy::FlagOutliers {
                threshold_multiplier: m,
            }
        }
        other => {
            return Err(ConfigError::new(
                "defense.kind",
                format!("unknown defense {other:?}; expected none, clip or flag_outliers"),
            ))
        }
    };
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        parse_config(text, Path::new("/tmp/exp"), "demo")
    }

    #[test]
    fn empty_file_gets_documented_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.model, ModelSpec::softmax_regression(32, 10));
        assert_eq!(cfg.num_rounds, 100);
        assert_eq!(cfg.num_malicious, 0);
        assert!(cfg.attack.is_none());
        assert_eq!(cfg.defense, DefensePolicy::None);
        assert_eq!(
            cfg.data.source,
            DataSource::Synthetic {
                samples_per_class: 600
            }
        );
        // 10 classes x 480 training rows / 10 clients
        assert_eq!(cfg.partition.samples_per_client, 480);
        assert_eq!(cfg.partition.unfair_set_size, 480);
        assert_eq!(cfg.partition.target_classes, [0, 1].into_iter().collect());
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/exp/runs/demo"));
    }

    #[test]
    fn minimal_attack_config() {
        let cfg = parse("[partition]\nnum_clients = 3\n[attack]\nstart_round = 20\n").unwrap();
        assert_eq!(cfg.num_malicious, 1);
        let a = cfg.attack.unwrap();
        assert_eq!(a.attack_start_round, 20);
        assert_eq!(a.estimated_honest_clients, 2);
        assert_eq!(a.estimated_count_per_client, 1600);
        assert_eq!(a.reported_count(), 1600);
        assert_eq!(a.target_classes, cfg.partition.target_classes);
    }

    #[test]
    fn majority_malicious_is_rejected() {
        let err = parse("num_malicious = 3\n[partition]\nnum_clients = 3\n[attack]\n").unwrap_err();
        assert_eq!(err.key, "num_malicious");
        assert!(err.message.contains("non-majority"));
        let err = parse("num_malicious = 2\n[partition]\nnum_clients = 4\n[attack]\n").unwrap_err();
        assert_eq!(err.key, "num_malicious");
    }

    #[test]
    fn attack_without_malicious_clients_is_rejected() {
        let err = parse("num_malicious = 0\n[attack]\nstart_round = 0\n").unwrap_err();
        assert_eq!(err.key, "attack");
        let err = parse("num_malicious = 1\n").unwrap_err();
        assert_eq!(err.key, "num_malicious");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert_eq!(err.key, "learning_rat");
        let err = parse("colour = 1\n").unwrap_err();
        assert_eq!(err.key, "colour");
    }

    #[test]
    fn field_level_errors_name_their_key() {
        let cases = [
            ("[model]\narchitecture = \"cnn\"\n", "model.architecture"),
            ("[model]\narchitecture = \"mlp\"\n", "model.hidden_sizes"),
            ("[model]\nhidden_sizes = [4]\n", "model.hidden_sizes"),
            ("[model]\nnum_classes = 1\n", "model.num_classes"),
            (
                "[training]\nlearning_rate = 0.0\n",
                "training.learning_rate",
            ),
            ("[training]\nbatch_size = 0\n", "training.batch_size"),
            ("[data]\ntest_fraction = 1.0\n", "data.test_fraction"),
            (
                "[partition]\ntarget_classes = []\n",
                "partition.target_classes",
            ),
            (
                "[partition]\ntarget_classes = [12]\n",
                "partition.target_classes",
            ),
            (
                "[partition]\nsamples_per_client = 1000\n",
                "partition.samples_per_client",
            ),
            ("[attack]\ntarget_mixture = 1.0\n", "attack.target_mixture"),
            ("[defense]\nkind = \"flame\"\n", "defense.kind"),
            (
                "[defense]\nkind = \"flag_outliers\"\nthreshold_multiplier = 1.0\n",
                "defense.threshold_multiplier",
            ),
            (
                "[defense]\nkind = \"clip\"\nbound = \"mean\"\n",
                "defense.bound",
            ),
            ("[defense]\nbound = 2.0\n", "defense.bound"),
            (
                "[attack]\nreported_count = \"all\"\n",
                "attack.reported_count",
            ),
            ("[attack]\nclip_to_norm = -1.0\n", "attack.clip_to_norm"),
            ("num_rounds = 0\n", "num_rounds"),
            ("[data]\ncsv = \"x.csv\"\n", "partition.samples_per_client"),
        ];
        for (text, key) in cases {
            match parse(text) {
                Err(e) => assert_eq!(e.key, key, "for {text:?}: {e}"),
                Ok(_) => panic!("accepted {text:?}"),
            }
        }
    }

    #[test]
    fn defense_variants() {
        let cfg = parse("[defense]\nkind = \"clip\"\n").unwrap();
        assert_eq!(cfg.defense, DefensePolicy::Clip(ClipBound::AdaptiveMedian));
        let cfg = parse("[defense]\nkind = \"clip\"\nbound = 1.5\n").unwrap();
        assert_eq!(cfg.defense, DefensePolicy::Clip(ClipBound::Fixed(1.5)));
        let cfg = parse("[defense]\nkind = \"flag_outliers\"\n").unwrap();
        assert_eq!(
            cfg.defense,
            DefensePolicy::FlagOutliers {
                threshold_multiplier: 3.0
            }
        );
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = r#"
            name = "full-3"
            seed = 11
            num_rounds = 40
            [model]
            architecture = "mlp"
            hidden_sizes = [16, 8]
            [partition]
            num_clients = 3
            samples_per_client = 400
            target_classes = [2, 5]
            [attack]
            start_round = 5
            reported_count = 800
            clip_to_norm = 3.5
            [defense]
            kind = "flag_outliers"
            threshold_multiplier = 4.0
        "#;
        let cfg = parse(text).unwrap();
        let again = parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);

        let csv =
            parse("[data]\ncsv = \"pool.csv\"\n[partition]\nsamples_per_client = 10\n").unwrap();
        assert_eq!(
            csv.data.source,
            DataSource::Csv {
                path: PathBuf::from("/tmp/exp/pool.csv")
            }
        );
        assert_eq!(parse(&csv.to_toml()).unwrap(), csv);
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut cfg = parse("seed = 1\n").unwrap();
        cfg.set_seed(9);
        assert_eq!((cfg.seed, cfg.training.seed, cfg.partition.seed), (9, 9, 9));
    }
}
