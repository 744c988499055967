//! Running configured experiments and multi-scenario comparison suites.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::attack::{mixed_target_set, MaliciousClient};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, LabeledDataset, Partition};
use crate::error::{Error, Result};
use crate::federation::{Client, Federation, HonestClient};
use crate::metrics::{render_report, FairnessReport, RoundCsvWriter, RoundRecord, ScenarioSummary};
use crate::model::init_parameters;
use crate::params::ParameterVector;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const SUITE_TABLE: &str = "suite.txt";

/// Data and initial model for an experiment, before any round runs.
pub struct Setup {
    pub federation: Federation,
    pub initial_params: ParameterVector,
    pub partition: Partition,
}

pub fn load_pool(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let pool = match &cfg.data.source {
        DataSource::Synthetic { samples_per_class } => data::generate_synthetic(
            cfg.model.num_classes,
            cfg.model.input_dim,
            *samples_per_class,
            cfg.seed,
        )?,
        DataSource::Csv { path } => data::load_csv(path, cfg.model.num_classes)?,
    };
    if pool.input_dim() != cfg.model.input_dim {
        return Err(Error::DimensionMismatch {
            context: "data width vs model.input_dim",
            expected: cfg.model.input_dim,
            actual: pool.input_dim(),
        });
    }
    Ok(pool)
}

/// Builds the roster: honest clients first, the `num_malicious` attackers
/// last. Attacker `k` holds clean slot `k` for its dormant rounds, the shared
/// unfair set and the shared representative set.
pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let pool = load_pool(cfg)?;
    let (train_ix, test_ix) = data::holdout_split(&pool, cfg.data.test_fraction, cfg.seed)?;
    let train_pool = pool.select(&train_ix);
    let test_set = pool.select(&test_ix);
    if test_set.class_counts().contains(&0) {
        return Err(Error::InvalidArgument(
            "every class needs at least one held-out test sample".into(),
        ));
    }
    let partition = data::partition(&train_pool, &cfg.partition)?;

    let honest = cfg.num_honest();
    let unfair = Arc::new(match &cfg.attack {
        Some(a) => mixed_target_set(
            &partition.unfair_set,
            &partition.representative_set,
            &a.target_classes,
            a.target_mixture,
        )?,
        None => partition.unfair_set.clone(),
    });
    let representative = Arc::new(partition.representative_set.clone());
    let mut clients: Vec<Box<dyn Client>> = Vec::with_capacity(cfg.partition.num_clients);
    for (id, set) in partition.clean_sets.iter().enumerate() {
        let dataset = Arc::new(set.clone());
        let name = format!("clean[{id}]");
        if id < honest {
            clients.push(Box::new(HonestClient {
                id,
                dataset,
                dataset_name: name,
                training: cfg.training.clone(),
            }));
        } else {
            let attack = cfg.attack.clone().ok_or_else(|| {
                Error::InvalidArgument("malicious clients need an attack configuration".into())
            })?;
            clients.push(Box::new(MaliciousClient {
                id,
                attack,
                training: cfg.training.clone(),
                unfair_set: unfair.clone(),
                representative_set: representative.clone(),
                benign_set: dataset,
                benign_set_name: name,
            }));
        }
    }

    Ok(Setup {
        federation: Federation {
            spec: cfg.model.clone(),
            clients,
            test_set,
            target_classes: cfg.partition.target_classes.clone(),
            defense: cfg.defense,
        },
        initial_params: init_parameters(&cfg.model, cfg.seed),
        partition,
    })
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.training.validate()?;
    cfg.partition.validate(cfg.model.num_classes)?;
    cfg.defense.validate()?;
    if 2 * cfg.num_malicious >= cfg.partition.num_clients {
        return Err(Error::InvalidArgument(
            "malicious clients must be a strict minority".into(),
        ));
    }
    match (&cfg.attack, cfg.num_malicious) {
        (Some(a), n) if n > 0 => a.validate(cfg.model.num_classes),
        (None, 0) => Ok(()),
        _ => Err(Error::InvalidArgument(
            "an attack configuration is required exactly when num_malicious > 0".into(),
        )),
    }
}

/// Runs every round in memory, handing each record to `on_round` as soon as
/// it exists.
pub fn simulate<F>(cfg: &ExperimentConfig, mut on_round: F) -> Result<Vec<RoundRecord>>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    validate(cfg)?;
    let setup = setup(cfg)?;
    let mut state = setup.federation.initial_state(setup.initial_params)?;
    let mut records = Vec::with_capacity(cfg.num_rounds);
    for _ in 0..cfg.num_rounds {
        let (next, record) = setup.federation.run_round(&state)?;
        on_round(&record)?;
        records.push(record);
        state = next;
    }
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub report: FairnessReport,
    pub summary: String,
    pub rounds_csv: PathBuf,
    pub report_path: PathBuf,
}

/// Runs one experiment, writing `config.toml`, `rounds.csv` and `report.txt`
/// under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    validate(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(RESOLVED_CONFIG);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let rounds_csv = dir.join(ROUNDS_CSV);
    let mut writer = RoundCsvWriter::create(&rounds_csv, cfg.model.num_classes)?;
    let records = simulate(cfg, |r| writer.append(r))?;

    let (report, summary) = render_report(&records, cfg)?;
    let report_path = dir.join(REPORT_TXT);
    fs::write(&report_path, &summary).map_err(|e| Error::io(&report_path, e))?;
    Ok(ExperimentOutcome {
        records,
        report,
        summary,
        rounds_csv,
        report_path,
    })
}

/// Row label in the comparison table.
pub fn scenario_label(cfg: &ExperimentConfig) -> String {
    let base = match &cfg.attack {
        None => "Baseline".to_string(),
        Some(a) if a.attack_start_round == 0 => "Full".to_string(),
        Some(a) => format!("Round {}", a.attack_start_round),
    };
    match cfg.defense {
        crate::defense::DefensePolicy::None => base,
        crate::defense::DefensePolicy::Clip(_) => format!("{base} +clip"),
        crate::defense::DefensePolicy::FlagOutliers { .. } => format!("{base} +flag"),
    }
}

/// Scenario rows by client-count columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteTable {
    pub client_counts: Vec<usize>,
    /// `(label, cells)`; one cell per client count, `None` when the scenario
    /// is missing or failed.
    pub rows: Vec<(String, Vec<Option<ScenarioSummary>>)>,
}

impl SuiteTable {
    pub fn cell(&self, label: &str, clients: usize) -> Option<ScenarioSummary> {
        let col = self.client_counts.iter().position(|&c| c == clients)?;
        self.rows
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, cells)| cells[col])
    }

    pub fn render(&self) -> String {
        const CELL: usize = 26;
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "");
        for c in &self.client_counts {
            let _ = write!(s, "| {:^w$}", format!("{c} clients"), w = CELL - 2);
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<16}", "Attack");
        for _ in &self.client_counts {
            let _ = write!(s, "| {:>7} {:>7} {:>8} ", "Target", "Other", "Overall");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", "-".repeat(16 + CELL * self.client_counts.len()));
        for (label, cells) in &self.rows {
            let _ = write!(s, "{label:<16}");
            for cell in cells {
                match cell {
                    Some(m) => {
                        let _ = write!(
                            s,
                            "| {:>7.2} {:>7.2} {:>8.2} ",
                            m.target_mean, m.other_mean, m.overall
                        );
                    }
                    None => {
                        let _ = write!(s, "| {:^w$}", "-", w = CELL - 2);
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }
}

pub struct ScenarioResult {
    pub name: String,
    pub label: String,
    pub num_clients: usize,
    pub outcome: Result<ExperimentOutcome>,
}

pub struct SuiteOutcome {
    pub scenarios: Vec<ScenarioResult>,
    pub table: SuiteTable,
}

impl SuiteOutcome {
    pub fn failures(&self) -> impl Iterator<Item = (&str, &Error)> {
        self.scenarios
            .iter()
            .filter_map(|s| s.outcome.as_ref().err().map(|e| (s.name.as_str(), e)))
    }
}

fn row_order(label: &str) -> (u8, usize, String) {
    let rank = if label.starts_with("Baseline") {
        (0, 0)
    } else if let Some(rest) = label.strip_prefix("Round ") {
        let n = rest
            .split_whitespace()
            .next()
            .and_then(|n| n.parse().ok())
            .unwrap_or(0);
        (1, n)
    } else {
        (2, 0)
    };
    (rank.0, rank.1, label.to_string())
}

/// Runs every scenario (in parallel) and tabulates the final means. A
/// failing scenario leaves a gap in the table and does not stop the others.
/// Scenario names must be unique and no two scenarios may share a table cell.
pub fn run_scenario_suite(configs: &[ExperimentConfig]) -> Result<SuiteOutcome> {
    let mut names = BTreeSet::new();
    let mut cells = BTreeMap::new();
    for cfg in configs {
        if !names.insert(cfg.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate scenario name {:?}",
                cfg.name
            )));
        }
        let cell = (scenario_label(cfg), cfg.partition.num_clients);
        if let Some(other) = cells.insert(cell.clone(), cfg.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "scenarios {other:?} and {:?} both fill the {:?} row at {} clients",
                cfg.name, cell.0, cell.1
            )));
        }
    }
    let scenarios: Vec<ScenarioResult> = configs
        .par_iter()
        .map(|cfg| ScenarioResult {
            name: cfg.name.clone(),
            label: scenario_label(cfg),
            num_clients: cfg.partition.num_clients,
            outcome: run_experiment(cfg),
        })
        .collect();

    let client_counts: Vec<usize> = scenarios
        .iter()
        .map(|s| s.num_clients)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows: BTreeMap<(u8, usize, String), Vec<Option<ScenarioSummary>>> = BTreeMap::new();
    for s in &scenarios {
        let col = client_counts
            .iter()
            .position(|&c| c == s.num_clients)
            .expect("collected above");
        let cells = rows
            .entry(row_order(&s.label))
            .or_insert_with(|| vec![None; client_counts.len()]);
        if let Ok(o) = &s.outcome {
            cells[col] = Some(o.report.summary);
        }
    }
    let table = SuiteTable {
        client_counts,
        rows: rows
            .into_iter()
            .map(|((_, _, label), cells)| (label, cells))
            .collect(),
    };
    Ok(SuiteOutcome { scenarios, table })
}

/// Points every scenario at `root/<name>`.
pub fn redirect_outputs(configs: &mut [ExperimentConfig], root: &Path) {
    for cfg in configs {
        cfg.output_dir = root.join(&cfg.name);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn cfg(text: &str, dir: &Path) -> ExperimentConfig {
        parse_config(text, dir, "t").unwrap()
    }

    #[test]
    fn labels() {
        let d = Path::new("/tmp");
        assert_eq!(scenario_label(&cfg("", d)), "Baseline");
        assert_eq!(
            scenario_label(&cfg("[partition]\nnum_clients=3\n[attack]\n", d)),
            "Full"
        );
        assert_eq!(
            scenario_label(&cfg(
                "[partition]\nnum_clients=3\n[attack]\nstart_round=20\n[defense]\nkind=\"clip\"\n",
                d
            )),
            "Round 20 +clip"
        );
        let mut rows = vec![
            row_order("Full"),
            row_order("Round 80"),
            row_order("Round 5"),
            row_order("Baseline"),
        ];
        rows.sort();
        let labels: Vec<_> = rows.into_iter().map(|r| r.2).collect();
        assert_eq!(labels, vec!["Baseline", "Round 5", "Round 80", "Full"]);
    }

    #[test]
    fn roster_places_attackers_last() {
        let c = cfg(
            "num_rounds = 1\nnum_malicious = 2\n[partition]\nnum_clients = 5\n[attack]\n",
            Path::new("/tmp"),
        );
        let s = setup(&c).unwrap();
        let roles: Vec<_> = s.federation.roster().iter().map(|d| d.role).collect();
        use crate::federation::Role::*;
        assert_eq!(roles, vec![Honest, Honest, Honest, Malicious, Malicious]);
        assert_eq!(s.federation.test_set.class_counts(), vec![120; 10]);
    }

    #[test]
    fn csv_width_must_match_model() {
        let dir = tempfile::tempdir().unwrap();
        let pool = data::generate_synthetic(3, 4, 20, 0).unwrap();
        data::write_csv(&pool, dir.path().join("pool.csv")).unwrap();
        let text = "[model]\ninput_dim = 5\nnum_classes = 3\n[data]\ncsv = \"pool.csv\"\n[partition]\nsamples_per_client = 10\ntarget_classes = [0]\n";
        let c = parse_config(text, dir.path(), "csv").unwrap();
        assert!(matches!(setup(&c), Err(Error::DimensionMismatch { .. })));
    }
}
