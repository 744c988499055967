//! Small differentiable classifiers over flat parameter vectors.
//!
//! Layout: for every layer, a `fan_out x fan_in` row-major weight block
//! followed by `fan_out` biases. Hidden layers use `tanh`; the output layer
//! is a softmax trained with mean cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::federation::ClientUpdate;
use crate::params::ParameterVector;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    SoftmaxRegression,
    Mlp { hidden_sizes: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if let Architecture::Mlp { hidden_sizes } = &architecture {
            if hidden_sizes.contains(&0) {
                return Err(Error::InvalidArgument(
                    "hidden sizes must be positive".into(),
                ));
            }
        }
        Ok(ModelSpec {
            architecture,
            input_dim,
            num_classes,
        })
    }

    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        Self::new(Architecture::SoftmaxRegression, input_dim, num_classes)
            .expect("positive dimensions")
    }

    pub fn mlp(input_dim: usize, hidden_sizes: Vec<usize>, num_classes: usize) -> Self {
        Self::new(Architecture::Mlp { hidden_sizes }, input_dim, num_classes)
            .expect("positive dimensions")
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        if let Architecture::Mlp { hidden_sizes } = &self.architecture {
            widths.extend_from_slice(hidden_sizes);
        }
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_out * fan_in + fan_out)
            .sum()
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        let d = self.parameter_count();
        if params.len() != d {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: d,
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_features(&self, features: &ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "feature width",
                expected: self.input_dim,
                actual: features.ncols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        TrainingConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "local_epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
pub fn init_parameters(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = seed::rng(seed::derive(seed, seed::Stream::Init, &[]));
    let mut values = Vec::with_capacity(spec.parameter_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let limit = 1.0 / (fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector::new(values)
}

struct Layer<'a> {
    weights: ArrayView2<'a, f64>,
    biases: ArrayView1<'a, f64>,
}

fn layers<'a>(params: &'a ParameterVector, spec: &ModelSpec) -> Vec<Layer<'a>> {
    let mut offset = 0;
    let values = params.as_slice();
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w = &values[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &values[offset..offset + fan_out];
            offset += fan_out;
            Layer {
                weights: ArrayView2::from_shape((fan_out, fan_in), w).expect("layer shape"),
                biases: ArrayView1::from(b),
            }
        })
        .collect()
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// Activations of every layer: `[input, hidden_1, ..., probabilities]`.
fn activations(layers: &[Layer<'_>], features: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let mut acts = vec![features.to_owned()];
    for (l, layer) in layers.iter().enumerate() {
        let z = acts[l].dot(&layer.weights.t()) + layer.biases;
        let a = if l + 1 == layers.len() {
            softmax_rows(z)
        } else {
            z.mapv(f64::tanh)
        };
        acts.push(a);
    }
    acts
}

/// Class probabilities, one row per sample.
pub fn forward(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    spec.check_params(params)?;
    spec.check_features(&features)?;
    let layers = layers(params, spec);
    Ok(activations(&layers, features).pop().expect("output layer"))
}

/// Arg-max class per row; ties go to the lowest class id.
pub fn predict(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
) -> Result<Vec<usize>> {
    let probs = forward(params, spec, features)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &p)| {
                    if p > best.1 {
                        (c, p)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

fn check_batch(spec: &ModelSpec, features: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    spec.check_features(features)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    if features.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "batch rows vs labels",
            expected: features.nrows(),
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn loss(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    spec.check_params(params)?;
    check_batch(spec, &features, labels)?;
    let probs = forward(params, spec, features)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`loss`] with respect to every parameter.
pub fn gradient(
    params: &ParameterVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<ParameterVector> {
    spec.check_params(params)?;
    check_batch(spec, &features, labels)?;
    let layers = layers(params, spec);
    let acts = activations(&layers, features);
    let batch = labels.len() as f64;

    // d(loss)/d(logits) = (p - onehot(y)) / B
    let mut delta = acts.last().expect("output layer").clone();
    for (i, &y) in labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta /= batch;

    let mut blocks: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let grad_w = delta.t().dot(&acts[l]);
        let grad_b = delta.sum_axis(Axis(0));
        if l > 0 {
            let back = delta.dot(&layers[l].weights);
            delta = back * acts[l].mapv(|a| 1.0 - a * a);
        }
        blocks.push((grad_w, grad_b));
    }

    let mut out = Vec::with_capacity(params.len());
    for (w, b) in blocks.iter().rev() {
        out.extend(w.iter().copied());
        out.extend(b.iter().copied());
    }
    Ok(ParameterVector::new(out))
}

/// Mini-batch SGD from `params` on `dataset`; returns the parameter delta and
/// the dataset size as the reported count.
///
/// Each epoch reshuffles with the seeded stream unless one batch covers the
/// whole dataset, in which case rows are used in their stored order.
pub fn local_train(
    params: &ParameterVector,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    cfg: &TrainingConfig,
) -> Result<ClientUpdate> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("local training set"));
    }
    cfg.validate()?;
    spec.check_params(params)?;
    let mut rng = seed::rng(cfg.seed);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let full_batch = cfg.batch_size >= dataset.len();

    for _ in 0..cfg.local_epochs {
        if full_batch {
            let g = gradient(&current, spec, dataset.features(), dataset.labels())?;
            current.axpy(-cfg.learning_rate, &g)?;
            continue;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.select(chunk);
            let g = gradient(&current, spec, batch.features(), batch.labels())?;
            current.axpy(-cfg.learning_rate, &g)?;
        }
    }
    if !current.is_finite() {
        return Err(Error::NonFinite("local training"));
    }
    ClientUpdate::new(current.sub(params)?, dataset.len())
}

/// Per-class and overall accuracy in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub class_counts: Vec<usize>,
}

impl Evaluation {
    /// Per-class accuracies, failing if any class was absent.
    pub fn defined_per_class(&self) -> Result<Vec<f64>> {
        self.per_class
            .iter()
            .enumerate()
            .map(|(c, a)| {
                a.ok_or_else(|| {
                    Error::InvalidArgument(format!("class {c} has no evaluation samples"))
                })
            })
            .collect()
    }

    /// Unweighted mean over the classes that are present.
    pub fn class_mean(&self) -> f64 {
        let defined: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "predictions vs labels",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut correct = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| 100.0 * c as f64 / n as f64))
        .collect();
    let overall = 100.0 * correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok(Evaluation {
        per_class,
        overall,
        class_counts: counts,
    })
}

pub fn evaluate(
    params: &ParameterVector,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let predictions = predict(params, spec, dataset.features())?;
    evaluate_predictions(&predictions, dataset.labels(), spec.num_classes)
}
