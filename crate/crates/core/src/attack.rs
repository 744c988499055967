//! The malicious client.
//!
//! Each attacked round it
//!
//! 1. trains a *target* update `m` from the current global model on data that
//!    only contains the favoured classes,
//! 2. predicts the honest clients' updates `û_i` by training once on its
//!    representative dataset, and
//! 3. submits `v = (n·m − Σ n̂_i·û_i) / n0` with reported count `n0`, so that
//!    FedAvg over `v` and the honest updates lands on `m` whenever the
//!    predictions are exact.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::data::LabeledDataset;
use crate::defense::clip_update;
use crate::error::{Error, Result};
use crate::federation::{
    Client, ClientDescriptor, ClientUpdate, Contribution, HonestClient, Role, RoundContext,
};
use crate::model::{local_train, ModelSpec, TrainingConfig};
use crate::params::ParameterVector;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportedCountPolicy {
    /// Report the same count the attacker expects from each honest client.
    #[default]
    MatchHonestEstimate,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub target_classes: BTreeSet<usize>,
    pub attack_start_round: usize,
    pub reported_count_policy: ReportedCountPolicy,
    /// Attacker's guess of the number of honest clients (`m`).
    pub estimated_honest_clients: usize,
    /// Attacker's guess of each honest client's count (`n̂_i`).
    pub estimated_count_per_client: usize,
    pub clip_to_norm: Option<f64>,
    /// Fraction of the target-training set drawn from non-target classes.
    /// Zero trains `m` on target classes only.
    pub target_mixture: f64,
}

impl AttackConfig {
    /// The `n0` the attacker reports.
    pub fn reported_count(&self) -> usize {
        match self.reported_count_policy {
            ReportedCountPolicy::MatchHonestEstimate => self.estimated_count_per_client,
            ReportedCountPolicy::Fixed(n0) => n0,
        }
    }

    pub fn is_active(&self, round: usize) -> bool {
        round >= self.attack_start_round
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        crate::data::validate_target_classes(&self.target_classes, num_classes)?;
        if self.estimated_honest_clients == 0 {
            return Err(Error::InvalidArgument(
                "estimated_honest_clients must be at least 1".into(),
            ));
        }
        if self.estimated_count_per_client == 0 || self.reported_count() == 0 {
            return Err(Error::ZeroCount);
        }
        if !(0.0..1.0).contains(&self.target_mixture) {
            return Err(Error::InvalidArgument(format!(
                "target_mixture must be in [0, 1), got {}",
                self.target_mixture
            )));
        }
        if let Some(c) = self.clip_to_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "clip_to_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// The update the attacker wants the aggregate to take (`m`).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetUpdate {
    pub delta: ParameterVector,
    pub source_round: usize,
}

pub fn compute_target_update(
    global_params: &ParameterVector,
    spec: &ModelSpec,
    unfair_set: &LabeledDataset,
    cfg: &TrainingConfig,
    round: usize,
) -> Result<TargetUpdate> {
    if unfair_set.is_empty() {
        return Err(Error::EmptyDataset("unfair set"));
    }
    let update = local_train(global_params, spec, unfair_set, cfg)?;
    Ok(TargetUpdate {
        delta: update.delta,
        source_round: round,
    })
}

/// The set the target update is trained on: the unfair set plus enough
/// non-target rows from the representative set that they make up `mixture`
/// of the result.
pub fn mixed_target_set(
    unfair_set: &LabeledDataset,
    representative_set: &LabeledDataset,
    target_classes: &BTreeSet<usize>,
    mixture: f64,
) -> Result<LabeledDataset> {
    if !(0.0..1.0).contains(&mixture) {
        return Err(Error::InvalidArgument(format!(
            "target_mixture must be in [0, 1), got {mixture}"
        )));
    }
    let extra = (mixture * unfair_set.len() as f64 / (1.0 - mixture)).round() as usize;
    if extra == 0 {
        return Ok(unfair_set.clone());
    }
    let others: Vec<usize> = (0..representative_set.len())
        .filter(|&i| !target_classes.contains(&representative_set.labels()[i]))
        .collect();
    if others.len() < extra {
        return Err(Error::InsufficientPool {
            required: extra,
            available: others.len(),
        });
    }
    unfair_set.concat(&representative_set.select(&others[..extra]))
}

/// Trains once on the representative set and replicates the delta for each
/// of the `honest_clients` expected honest participants.
pub fn predict_clean_updates(
    global_params: &ParameterVector,
    spec: &ModelSpec,
    representative_set: &LabeledDataset,
    cfg: &TrainingConfig,
    honest_clients: usize,
    count_per_client: usize,
) -> Result<Vec<ClientUpdate>> {
    if representative_set.is_empty() {
        return Err(Error::EmptyDataset("representative set"));
    }
    if honest_clients == 0 {
        return Err(Error::InvalidArgument(
            "need at least one predicted honest client".into(),
        ));
    }
    let trained = local_train(global_params, spec, representative_set, cfg)?;
    let predicted = ClientUpdate::new(trained.delta, count_per_client)?;
    Ok(vec![predicted; honest_clients])
}

/// `v = (n·m − Σ n̂_i·û_i) / n0` with `n = n0 + Σ n̂_i`.
pub fn solve_malicious_update(
    target: &TargetUpdate,
    predicted: &[ClientUpdate],
    n0: usize,
) -> Result<ClientUpdate> {
    if n0 == 0 {
        return Err(Error::ZeroCount);
    }
    let total = n0 + predicted.iter().map(|u| u.reported_count).sum::<usize>();
    let mut scaled = target.delta.scaled(total as f64);
    for u in predicted {
        scaled.axpy(-(u.reported_count as f64), &u.delta)?;
    }
    let v = scaled.scaled(1.0 / n0 as f64);
    if !v.is_finite() {
        return Err(Error::NonFinite("malicious update"));
    }
    ClientUpdate::new(v, n0)
}

/// Magnitude of the malicious update when target and clean updates share a
/// direction and magnitude `x`: `((n − Σ n_i) / n0)·x`, which is `x` itself
/// whenever `n = n0 + Σ n_i`.
pub fn malicious_norm_bound(x: f64, total: usize, n0: usize, honest_counts: &[usize]) -> f64 {
    let honest: usize = honest_counts.iter().sum();
    (total as f64 - honest as f64) / n0 as f64 * x
}

/// Attack internals for one round, kept for instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub active: bool,
    pub target: Option<TargetUpdate>,
    pub predicted: Vec<ClientUpdate>,
    pub unclipped_norm: f64,
    pub clipped: bool,
}

/// Everything the attacker can see or owns in a round.
#[derive(Clone, Copy, Debug)]
pub struct AttackInputs<'a> {
    pub client_id: usize,
    pub round: usize,
    pub global_params: &'a ParameterVector,
    pub spec: &'a ModelSpec,
    /// Base training configuration; its seed is the experiment seed from
    /// which per-round streams are derived.
    pub training: &'a TrainingConfig,
    pub unfair_set: &'a LabeledDataset,
    pub representative_set: &'a LabeledDataset,
    /// Data used while the attack is dormant.
    pub benign_set: &'a LabeledDataset,
}

/// One round of the malicious client. Before `attack_start_round` it trains
/// exactly like an honest client with the same id would.
pub fn malicious_client_step(
    inputs: &AttackInputs<'_>,
    cfg: &AttackConfig,
) -> Result<(ClientUpdate, AttackTrace)> {
    let base = inputs.training.seed;
    let coords = [inputs.round as u64, inputs.client_id as u64];
    if !cfg.is_active(inputs.round) {
        let honest = inputs.training.with_seed(HonestClient::round_seed(
            base,
            inputs.round,
            inputs.client_id,
        ));
        let update = local_train(
            inputs.global_params,
            inputs.spec,
            inputs.benign_set,
            &honest,
        )?;
        let trace = AttackTrace {
            active: false,
            target: None,
            predicted: Vec::new(),
            unclipped_norm: update.delta.norm(),
            clipped: false,
        };
        return Ok((update, trace));
    }

    let target_cfg =
        inputs
            .training
            .with_seed(seed::derive(base, seed::Stream::TargetUpdate, &coords));
    let target = compute_target_update(
        inputs.global_params,
        inputs.spec,
        inputs.unfair_set,
        &target_cfg,
        inputs.round,
    )?;
    let predict_cfg =
        inputs
            .training
            .with_seed(seed::derive(base, seed::Stream::Prediction, &coords));
    let predicted = predict_clean_updates(
        inputs.global_params,
        inputs.spec,
        inputs.representative_set,
        &predict_cfg,
        cfg.estimated_honest_clients,
        cfg.estimated_count_per_client,
    )?;
    let raw = solve_malicious_update(&target, &predicted, cfg.reported_count())?;
    let unclipped_norm = raw.delta.norm();
    let (update, clipped) = match cfg.clip_to_norm {
        Some(bound) => clip_update(&raw, bound),
        None => (raw, false),
    };
    let trace = AttackTrace {
        active: true,
        target: Some(target),
        predicted,
        unclipped_norm,
        clipped,
    };
    Ok((update, trace))
}

#[derive(Clone, Debug)]
pub struct MaliciousClient {
    pub id: usize,
    pub attack: AttackConfig,
    pub training: TrainingConfig,
    pub unfair_set: Arc<LabeledDataset>,
    pub representative_set: Arc<LabeledDataset>,
    pub benign_set: Arc<LabeledDataset>,
    pub benign_set_name: String,
}

impl Client for MaliciousClient {
    fn descriptor(&self) -> ClientDescriptor {
        ClientDescriptor {
            id: self.id,
            role: Role::Malicious,
            dataset: self.benign_set_name.clone(),
        }
    }

    fn participate(&self, ctx: &RoundContext<'_>) -> Result<Contribution> {
        let inputs = AttackInputs {
            client_id: self.id,
            round: ctx.round,
            global_params: ctx.global_params,
            spec: ctx.spec,
            training: &self.training,
            unfair_set: &self.unfair_set,
            representative_set: &self.representative_set,
            benign_set: &self.benign_set,
        };
        let (update, trace) = malicious_client_step(&inputs, &self.attack)?;
        Ok(Contribution {
            update,
            trace: Some(trace),
        })
    }
}
