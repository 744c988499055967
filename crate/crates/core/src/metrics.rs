//! Attribute-level fairness measurements, per-round records, the round CSV
//! and the end-of-run report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::defense::{median_norm, ClipBound, DefenseAction, DefensePolicy};
use crate::error::{Error, Result};
use crate::model::Evaluation;

/// Mean accuracy over the target classes, over the rest, and their
/// difference. All in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FairnessSplit {
    pub target_mean: f64,
    pub other_mean: f64,
    pub gap: f64,
}

/// Unweighted class means on either side of the target set.
pub fn fairness_gap(
    per_class_accuracy: &[f64],
    target_classes: &BTreeSet<usize>,
) -> Result<FairnessSplit> {
    if let Some(&c) = target_classes
        .iter()
        .find(|&&c| c >= per_class_accuracy.len())
    {
        return Err(Error::LabelOutOfRange {
            label: c,
            num_classes: per_class_accuracy.len(),
        });
    }
    let (mut target, mut other) = (Vec::new(), Vec::new());
    for (c, &acc) in per_class_accuracy.iter().enumerate() {
        if target_classes.contains(&c) {
            target.push(acc);
        } else {
            other.push(acc);
        }
    }
    if target.is_empty() || other.is_empty() {
        return Err(Error::InvalidArgument(
            "fairness gap needs at least one target and one non-target class".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (target_mean, other_mean) = (mean(&target), mean(&other));
    Ok(FairnessSplit {
        target_mean,
        other_mean,
        gap: target_mean - other_mean,
    })
}

/// Instrumentation recorded for rounds in which exactly one client attacked.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackDiagnostics {
    /// Norm of the submitted malicious update `v`.
    pub malicious_norm: f64,
    /// Norm of `v` before the attacker's own clipping.
    pub unclipped_malicious_norm: f64,
    pub target_norm: f64,
    pub honest_norms: Vec<f64>,
    /// Max-coordinate distance between the aggregated delta and `m`.
    pub aggregate_target_distance: f64,
    /// Mean of `‖û_i − u_i‖ / ‖u_i‖` over honest clients.
    pub prediction_error: Option<f64>,
    /// `‖(aggregate − m) − (1/n) Σ n_i (u_i − û_i)‖_∞`; absent when the
    /// defense or the attacker's clipping altered the submitted updates.
    pub identity_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub target_mean: f64,
    pub other_mean: f64,
    pub fairness_gap: f64,
    /// Norms of the updates as submitted, in roster order.
    pub per_client_update_norm: Vec<f64>,
    pub attack_active: bool,
    pub defense_actions: Vec<DefenseAction>,
    pub diagnostics: Option<AttackDiagnostics>,
}

impl RoundRecord {
    pub fn new(
        round: usize,
        eval: &Evaluation,
        target_classes: &BTreeSet<usize>,
        per_client_update_norm: Vec<f64>,
        attack_active: bool,
        defense_actions: Vec<DefenseAction>,
        diagnostics: Option<AttackDiagnostics>,
    ) -> Result<Self> {
        let per_class_accuracy = eval.defined_per_class()?;
        let split = fairness_gap(&per_class_accuracy, target_classes)?;
        Ok(RoundRecord {
            round,
            per_class_accuracy,
            overall_accuracy: eval.overall,
            target_mean: split.target_mean,
            other_mean: split.other_mean,
            fairness_gap: split.gap,
            per_client_update_norm,
            attack_active,
            defense_actions,
            diagnostics,
        })
    }

    pub fn max_update_norm(&self) -> f64 {
        self.per_client_update_norm
            .iter()
            .fold(0.0, |m, &v| m.max(v))
    }

    pub fn median_update_norm(&self) -> f64 {
        if self.per_client_update_norm.is_empty() {
            return 0.0;
        }
        median_norm(&self.per_client_update_norm)
    }
}

fn csv_header(num_classes: usize) -> String {
    let mut cols = vec!["round".to_string()];
    cols.extend((0..num_classes).map(|c| format!("acc_class_{c}")));
    cols.extend(
        [
            "overall",
            "target_mean",
            "other_mean",
            "gap",
            "attack_active",
            "max_update_norm",
            "median_update_norm",
            "defense_actions",
        ]
        .map(String::from),
    );
    cols.join(",")
}

fn csv_row(r: &RoundRecord) -> String {
    let mut line = r.round.to_string();
    for a in &r.per_class_accuracy {
        write!(line, ",{a}").expect("string write");
    }
    let actions: Vec<String> = r.defense_actions.iter().map(ToString::to_string).collect();
    write!(
        line,
        ",{},{},{},{},{},{},{},{}",
        r.overall_accuracy,
        r.target_mean,
        r.other_mean,
        r.fairness_gap,
        r.attack_active,
        r.max_update_norm(),
        r.median_update_norm(),
        actions.join(";")
    )
    .expect("string write");
    line
}

/// Appends one line per round and flushes after each, so a partially
/// written file is always a valid prefix of the final one.
///
/// Reals are written in the shortest form that parses back to the same
/// `f64`.
pub struct RoundCsvWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    num_classes: usize,
}

impl RoundCsvWriter {
    pub fn create(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = RoundCsvWriter {
            out: BufWriter::new(file),
            path,
            num_classes,
        };
        writer.write_line(&csv_header(num_classes))?;
        Ok(writer)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &RoundRecord) -> Result<()> {
        if record.per_class_accuracy.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                context: "round record classes",
                expected: self.num_classes,
                actual: record.per_class_accuracy.len(),
            });
        }
        self.write_line(&csv_row(record))
    }
}

pub fn emit_round_csv(records: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no round records to write".into()))?;
    let mut writer = RoundCsvWriter::create(path, first.per_class_accuracy.len())?;
    records.iter().try_for_each(|r| writer.append(r))
}

/// One parsed line of a round CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundCsvRow {
    pub round: usize,
    pub per_class_accuracy: Vec<f64>,
    pub overall: f64,
    pub target_mean: f64,
    pub other_mean: f64,
    pub gap: f64,
    pub attack_active: bool,
    pub max_update_norm: f64,
    pub median_update_norm: f64,
    pub defense_actions: String,
}

pub fn read_round_csv(path: impl AsRef<Path>) -> Result<Vec<RoundCsvRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let num_classes = header
        .iter()
        .filter(|h| h.starts_with("acc_class_"))
        .count();
    if header.iter().collect::<Vec<_>>().join(",") != csv_header(num_classes) {
        return Err(err(1, "unexpected round CSV header".into()));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let real = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| err(line, format!("column {}: not a number", &header[i])))
        };
        let c = num_classes;
        rows.push(RoundCsvRow {
            round: record[0]
                .parse()
                .map_err(|_| err(line, "round: not an integer".into()))?,
            per_class_accuracy: (1..=c).map(real).collect::<Result<_>>()?,
            overall: real(c + 1)?,
            target_mean: real(c + 2)?,
            other_mean: real(c + 3)?,
            gap: real(c + 4)?,
            attack_active: record[c + 5]
                .parse()
                .map_err(|_| err(line, "attack_active: not a bool".into()))?,
            max_update_norm: real(c + 6)?,
            median_update_norm: real(c + 7)?,
            defense_actions: record[c + 8].to_string(),
        });
    }
    Ok(rows)
}

/// Final target, other and overall accuracy for one scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSummary {
    pub target_mean: f64,
    pub other_mean: f64,
    /// Unweighted mean over all classes.
    pub overall: f64,
}

impl ScenarioSummary {
    pub fn from_per_class(per_class: &[f64], target_classes: &BTreeSet<usize>) -> Result<Self> {
        let split = fairness_gap(per_class, target_classes)?;
        Ok(ScenarioSummary {
            target_mean: split.target_mean,
            other_mean: split.other_mean,
            overall: per_class.iter().sum::<f64>() / per_class.len() as f64,
        })
    }

    pub fn gap(&self) -> f64 {
        self.target_mean - self.other_mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessReport {
    pub scenario: String,
    pub num_clients: usize,
    pub num_malicious: usize,
    pub target_classes: BTreeSet<usize>,
    /// First and last attacked round, if the attack ever ran.
    pub attack_window: Option<(usize, usize)>,
    pub defense: DefensePolicy,
    pub final_record: RoundRecord,
    pub summary: ScenarioSummary,
    pub baseline: Option<ScenarioSummary>,
}

impl FairnessReport {
    pub fn with_baseline(mut self, baseline: &FairnessReport) -> Self {
        self.baseline = Some(baseline.summary);
        self
    }

    pub fn malicious_fraction(&self) -> f64 {
        self.num_malicious as f64 / self.num_clients as f64
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "scenario: {}", self.scenario);
        let _ = writeln!(
            w,
            "clients: {} ({} malicious, {:.1}%)",
            self.num_clients,
            self.num_malicious,
            100.0 * self.malicious_fraction()
        );
        let _ = writeln!(w, "rounds: {}", self.final_record.round + 1);
        let targets: Vec<String> = self.target_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(w, "target classes: {}", targets.join(", "));
        match self.attack_window {
            None if self.num_malicious == 0 => {
                let _ = writeln!(w, "attack: no attack configured");
            }
            None => {
                let _ = writeln!(w, "attack: configured but never started");
            }
            Some((first, last)) => {
                let _ = writeln!(w, "attack: active in rounds {first}..={last}");
            }
        }
        let _ = writeln!(w, "defense: {}", describe_defense(&self.defense));
        let _ = writeln!(w);
        let _ = writeln!(
            w,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            "", "Target", "Other", "Overall", "Gap"
        );
        let row = |w: &mut String, label: &str, m: &ScenarioSummary| {
            let _ = writeln!(
                w,
                "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                label,
                m.target_mean,
                m.other_mean,
                m.overall,
                m.gap()
            );
        };
        row(w, "final", &self.summary);
        if let Some(b) = &self.baseline {
            row(w, "baseline", b);
        }
        let _ = writeln!(w);
        if self.attack_window.is_some() {
            let _ = writeln!(
                w,
                ">>> fairness gap under attack: {:.2} points",
                self.summary.gap()
            );
        } else {
            let _ = writeln!(w, "fairness gap: {:.2} points", self.summary.gap());
        }
        let per_class: Vec<String> = self
            .final_record
            .per_class_accuracy
            .iter()
            .enumerate()
            .map(|(c, a)| format!("{c}:{a:.2}"))
            .collect();
        let _ = writeln!(w, "per-class accuracy: {}", per_class.join(" "));
        s
    }
}

pub fn describe_defense(policy: &DefensePolicy) -> String {
    match policy {
        DefensePolicy::None => "none".into(),
        DefensePolicy::Clip(ClipBound::Fixed(b)) => format!("clip to norm {b}"),
        DefensePolicy::Clip(ClipBound::AdaptiveMedian) => "clip to median norm".into(),
        DefensePolicy::FlagOutliers {
            threshold_multiplier,
        } => format!("exclude norms above {threshold_multiplier} x median"),
    }
}

/// Final report for a finished run plus its human-readable text.
pub fn render_report(
    records: &[RoundRecord],
    cfg: &ExperimentConfig,
) -> Result<(FairnessReport, String)> {
    let final_record = records
        .last()
        .ok_or_else(|| Error::InvalidArgument("no rounds recorded".into()))?
        .clone();
    let attacked: Vec<usize> = records
        .iter()
        .filter(|r| r.attack_active)
        .map(|r| r.round)
        .collect();
    let summary = ScenarioSummary::from_per_class(
        &final_record.per_class_accuracy,
        &cfg.partition.target_classes,
    )?;
    let report = FairnessReport {
        scenario: cfg.name.clone(),
        num_clients: cfg.partition.num_clients,
        num_malicious: cfg.num_malicious,
        target_classes: cfg.partition.target_classes.clone(),
        attack_window: attacked
            .first()
            .map(|&f| (f, *attacked.last().expect("non-empty"))),
        defense: cfg.defense,
        final_record,
        summary,
        baseline: None,
    };
    let text = report.render();
    Ok((report, text))
}
