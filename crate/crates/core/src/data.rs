//! Labeled datasets: synthetic generation, CSV I/O, hold-out splits,
//! client partitioning and class filtering.
//!
//! Class labels double as the fairness attributes throughout the crate.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// Within-class standard deviation of the synthetic clusters.
pub const CLUSTER_STD: f64 = 1.0;
/// Minimum pairwise distance between synthetic class means, in units of
/// [`CLUSTER_STD`].
pub const MIN_MEAN_SEPARATION: f64 = 3.0;
/// Expected pairwise distance between synthetic class means before the
/// minimum-separation rejection step.
const EXPECTED_MEAN_DISTANCE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows vs labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// `self`'s rows followed by `other`'s.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.input_dim() != other.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "concatenated dataset",
                expected: self.input_dim(),
                actual: other.input_dim(),
            });
        }
        let features =
            ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
                .expect("widths checked above");
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        LabeledDataset::new(features, labels, self.num_classes.max(other.num_classes))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Gaussian cluster per class around seeded means. Rows are grouped by class
/// (all of class 0 first).
///
/// Means are drawn isotropically and redrawn until every pair sits at least
/// `MIN_MEAN_SEPARATION * CLUSTER_STD` apart; if that keeps failing the
/// spread is widened slightly so low-dimensional requests terminate.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, input_dim and samples_per_class must be positive".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed, seed::Stream::Data, &[]));
    let mut scale = EXPECTED_MEAN_DISTANCE / (2.0 * input_dim as f64).sqrt();
    let means = 'search: loop {
        for _ in 0..64 {
            let means: Array2<f64> = Array2::from_shape_simple_fn((num_classes, input_dim), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            if min_pairwise_distance(&means) >= MIN_MEAN_SEPARATION * CLUSTER_STD {
                break 'search means;
            }
        }
        scale *= 1.05;
    };

    let rows = num_classes * samples_per_class;
    let mut features = Array2::zeros((rows, input_dim));
    let mut labels = Vec::with_capacity(rows);
    for class in 0..num_classes {
        for s in 0..samples_per_class {
            let r = class * samples_per_class + s;
            for j in 0..input_dim {
                let noise: f64 = rng.sample(StandardNormal);
                features[[r, j]] = means[[class, j]] + CLUSTER_STD * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

fn min_pairwise_distance(means: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..means.nrows() {
        for b in a + 1..means.nrows() {
            let d = (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Reads `f0,...,f{k-1},label` rows. Line numbers in errors are 1-based and
/// count the header.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };

    let header = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(csv_err(1, "header must be f0,...,f{k-1},label".into()));
    }
    for (j, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(csv_err(1, format!("expected column f{j}, found {name:?}")));
        }
    }

    let input_dim = width - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(csv_err(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (j, field) in record.iter().take(input_dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(line, format!("f{j}: not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("f{j}: non-finite value {field:?}")));
            }
            values.push(v);
        }
        let raw = &record[input_dim];
        let label: usize = raw
            .parse()
            .map_err(|_| csv_err(line, format!("label: not an integer: {raw:?}")))?;
        if label >= num_classes {
            return Err(csv_err(
                line,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        labels.push(label);
    }

    let features = Array2::from_shape_vec((labels.len(), input_dim), values)
        .expect("row widths checked above");
    LabeledDataset::new(features, labels, num_classes)
}

/// Writes the dataset in the schema read by [`load_csv`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        let header: Vec<String> = (0..ds.input_dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, label) in ds.labels.iter().enumerate() {
            for v in ds.features.row(i) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{label}")?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Stratified hold-out split: from every class, `round(fraction * count)`
/// rows go to the held-out side. Returns `(train_indices, holdout_indices)`
/// into `ds`, both sorted.
pub fn holdout_split(
    ds: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "hold-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, seed::Stream::Holdout, &[]));
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in 0..ds.num_classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        rows.shuffle(&mut rng);
        let take = (fraction * rows.len() as f64).round() as usize;
        holdout.extend_from_slice(&rows[..take]);
        train.extend_from_slice(&rows[take..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub unfair_set_size: usize,
    pub target_classes: BTreeSet<usize>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 || self.samples_per_client == 0 || self.unfair_set_size == 0 {
            return Err(Error::InvalidArgument(
                "num_clients, samples_per_client and unfair_set_size must be positive".into(),
            ));
        }
        validate_target_classes(&self.target_classes, num_classes)
    }
}

/// Target classes must be a non-empty proper subset of `0..num_classes`.
pub fn validate_target_classes(targets: &BTreeSet<usize>, num_classes: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("target_classes is empty".into()));
    }
    if let Some(&c) = targets.iter().find(|&&c| c >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: c,
            num_classes,
        });
    }
    if targets.len() >= num_classes {
        return Err(Error::InvalidArgument(
            "target_classes must leave at least one non-target class".into(),
        ));
    }
    Ok(())
}

/// Client datasets cut from a pool. Index vectors refer to pool rows.
#[derive(Clone, Debug)]
pub struct Partition {
    pub clean_sets: Vec<LabeledDataset>,
    pub clean_indices: Vec<Vec<usize>>,
    /// Target-class rows only, drawn from the union of the clean sets.
    pub unfair_set: LabeledDataset,
    pub unfair_indices: Vec<usize>,
    /// The attacker's stand-in for an honest client's data: an i.i.d. draw
    /// from the whole pool, same size as one clean set.
    pub representative_set: LabeledDataset,
    pub representative_indices: Vec<usize>,
}

pub fn partition(pool: &LabeledDataset, plan: &PartitionPlan) -> Result<Partition> {
    plan.validate(pool.num_classes())?;
    let required = plan.num_clients * plan.samples_per_client;
    if required > pool.len() {
        return Err(Error::InsufficientPool {
            required,
            available: pool.len(),
        });
    }
    let mut rng = seed::rng(seed::derive(plan.seed, seed::Stream::Partition, &[]));

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let clean_indices: Vec<Vec<usize>> = order[..required]
        .chunks(plan.samples_per_client)
        .map(<[usize]>::to_vec)
        .collect();

    let mut eligible: Vec<usize> = clean_indices
        .iter()
        .flatten()
        .copied()
        .filter(|&i| plan.target_classes.contains(&pool.labels[i]))
        .collect();
    if eligible.len() < plan.unfair_set_size {
        return Err(Error::InsufficientPool {
            required: plan.unfair_set_size,
            available: eligible.len(),
        });
    }
    eligible.shuffle(&mut rng);
    eligible.truncate(plan.unfair_set_size);
    let unfair_indices = eligible;

    let representative_indices =
        rand::seq::index::sample(&mut rng, pool.len(), plan.samples_per_client).into_vec();

    Ok(Partition {
        clean_sets: clean_indices.iter().map(|ix| pool.select(ix)).collect(),
        unfair_set: pool.select(&unfair_indices),
        representative_set: pool.select(&representative_indices),
        clean_indices,
        unfair_indices,
        representative_indices,
    })
}

/// Rows whose label is in `classes`, order preserved.
pub fn filter_by_classes(ds: &LabeledDataset, classes: &BTreeSet<usize>) -> Result<LabeledDataset> {
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels[i]))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyFilter {
            classes: classes.iter().copied().collect(),
        });
    }
    Ok(ds.select(&keep))
}
