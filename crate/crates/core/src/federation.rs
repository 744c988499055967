//! Rounds of federated training: broadcast, local updates, screening,
//! FedAvg, global step.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;

use crate::attack::AttackTrace;
use crate::data::LabeledDataset;
use crate::defense::{apply_defense, DefensePolicy, SubmittedUpdate};
use crate::error::{Error, Result};
use crate::metrics::{AttackDiagnostics, RoundRecord};
use crate::model::{evaluate, local_train, ModelSpec, TrainingConfig};
use crate::params::ParameterVector;
use crate::seed;

/// A parameter delta and the number of datapoints the client claims it was
/// trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub delta: ParameterVector,
    pub reported_count: usize,
}

impl ClientUpdate {
    pub fn new(delta: ParameterVector, reported_count: usize) -> Result<Self> {
        if reported_count == 0 {
            return Err(Error::ZeroCount);
        }
        Ok(ClientUpdate {
            delta,
            reported_count,
        })
    }
}

/// Count-weighted mean of the deltas, `sum(n_i * delta_i) / sum(n_i)`,
/// accumulated in list order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let first = updates.first().ok_or(Error::EmptyUpdates)?;
    let d = first.delta.len();
    let mut acc = ParameterVector::zeros(d);
    let mut total = 0usize;
    for u in updates {
        if u.reported_count == 0 {
            return Err(Error::ZeroCount);
        }
        acc.axpy(u.reported_count as f64, &u.delta)?;
        total += u.reported_count;
    }
    Ok(acc.scaled(1.0 / total as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Honest,
    Malicious,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientDescriptor {
    pub id: usize,
    pub role: Role,
    /// Human-readable name of the client's data, e.g. `clean[2]`.
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationState {
    pub round: usize,
    pub global_params: ParameterVector,
    pub roster: Vec<ClientDescriptor>,
}

/// What every client sees at the start of a round.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub global_params: &'a ParameterVector,
    pub spec: &'a ModelSpec,
}

#[derive(Clone, Debug)]
pub struct Contribution {
    pub update: ClientUpdate,
    /// Set by malicious clients; exposes the attack's internals to the
    /// simulator for instrumentation. The server never reads it.
    pub trace: Option<AttackTrace>,
}

pub trait Client: Send + Sync {
    fn descriptor(&self) -> ClientDescriptor;
    fn participate(&self, ctx: &RoundContext<'_>) -> Result<Contribution>;
}

/// Trains on its own data with a fresh seed per round.
#[derive(Clone, Debug)]
pub struct HonestClient {
    pub id: usize,
    pub dataset: Arc<LabeledDataset>,
    pub dataset_name: String,
    pub training: TrainingConfig,
}

impl HonestClient {
    /// Seed used for this client's local training in `round`.
    pub fn round_seed(base: u64, round: usize, id: usize) -> u64 {
        seed::derive(
            base,
            seed::Stream::LocalTraining,
            &[round as u64, id as u64],
        )
    }
}

impl Client for HonestClient {
    fn descriptor(&self) -> ClientDescriptor {
        ClientDescriptor {
            id: self.id,
            role: Role::Honest,
            dataset: self.dataset_name.clone(),
        }
    }

    fn participate(&self, ctx: &RoundContext<'_>) -> Result<Contribution> {
        let cfg = self
            .training
            .with_seed(Self::round_seed(self.training.seed, ctx.round, self.id));
        Ok(Contribution {
            update: local_train(ctx.global_params, ctx.spec, &self.dataset, &cfg)?,
            trace: None,
        })
    }
}

/// Server side of the simulation: clients, held-out test set and screening
/// policy.
pub struct Federation {
    pub spec: ModelSpec,
    pub clients: Vec<Box<dyn Client>>,
    pub test_set: LabeledDataset,
    pub target_classes: BTreeSet<usize>,
    pub defense: DefensePolicy,
}

impl Federation {
    pub fn roster(&self) -> Vec<ClientDescriptor> {
        self.clients.iter().map(|c| c.descriptor()).collect()
    }

    pub fn initial_state(&self, global_params: ParameterVector) -> Result<FederationState> {
        if global_params.len() != self.spec.parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "initial parameters",
                expected: self.spec.parameter_count(),
                actual: global_params.len(),
            });
        }
        Ok(FederationState {
            round: 0,
            global_params,
            roster: self.roster(),
        })
    }

    /// One full round. Clients train concurrently; their updates are reduced
    /// in roster order.
    pub fn run_round(&self, state: &FederationState) -> Result<(FederationState, RoundRecord)> {
        if self.clients.is_empty() {
            return Err(Error::EmptyUpdates);
        }
        let ctx = RoundContext {
            round: state.round,
            global_params: &state.global_params,
            spec: &self.spec,
        };
        let contributions: Vec<Contribution> = self
            .clients
            .par_iter()
            .map(|c| {
                c.participate(&ctx).map_err(|e| Error::Client {
                    id: c.descriptor().id,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;

        let submitted: Vec<SubmittedUpdate> = self
            .clients
            .iter()
            .zip(&contributions)
            .map(|(c, contrib)| SubmittedUpdate {
                client_id: c.descriptor().id,
                update: contrib.update.clone(),
            })
            .collect();
        for s in &submitted {
            if s.update.delta.len() != state.global_params.len() {
                return Err(Error::Client {
                    id: s.client_id,
                    source: Box::new(Error::DimensionMismatch {
                        context: "client delta",
                        expected: state.global_params.len(),
                        actual: s.update.delta.len(),
                    }),
                });
            }
        }
        let norms: Vec<f64> = submitted.iter().map(|s| s.update.delta.norm()).collect();

        let (screened, actions) = apply_defense(&submitted, &self.defense);
        let accepted: Vec<ClientUpdate> = screened.into_iter().map(|s| s.update).collect();
        let aggregate = fedavg_aggregate(&accepted)?;
        let global = state.global_params.add(&aggregate)?;
        if !global.is_finite() {
            return Err(Error::NonFinite("global model"));
        }

        let eval = evaluate(&global, &self.spec, &self.test_set)?;
        let attack_active = contributions
            .iter()
            .any(|c| c.trace.as_ref().is_some_and(|t| t.active));
        let diagnostics = self.diagnostics(&contributions, &aggregate, actions.is_empty());

        let record = RoundRecord::new(
            state.round,
            &eval,
            &self.target_classes,
            norms,
            attack_active,
            actions,
            diagnostics,
        )?;
        let next = FederationState {
            round: state.round + 1,
            global_params: global,
            roster: state.roster.clone(),
        };
        Ok((next, record))
    }

    /// Instrumented view of an attacked round: compares the aggregate with
    /// the target and the attacker's predictions with the true honest
    /// updates. Only defined when exactly one client attacked.
    fn diagnostics(
        &self,
        contributions: &[Contribution],
        aggregate: &ParameterVector,
        untouched_by_defense: bool,
    ) -> Option<AttackDiagnostics> {
        let mut active = contributions
            .iter()
            .filter_map(|c| c.trace.as_ref().filter(|t| t.active).map(|t| (c, t)));
        let (attacker, trace) = active.next()?;
        if active.next().is_some() {
            return None;
        }
        let target = trace.target.as_ref()?;
        let honest: Vec<&ClientUpdate> = contributions
            .iter()
            .filter(|c| c.trace.is_none())
            .map(|c| &c.update)
            .collect();

        let honest_norms: Vec<f64> = honest.iter().map(|u| u.delta.norm()).collect();
        let paired = trace.predicted.len() == honest.len();
        let prediction_error = (paired && !honest.is_empty()).then(|| {
            honest
                .iter()
                .zip(&trace.predicted)
                .map(|(u, p)| {
                    let err = p.delta.sub(&u.delta).expect("lengths checked").norm();
                    err / u.delta.norm().max(f64::MIN_POSITIVE)
                })
                .sum::<f64>()
                / honest.len() as f64
        });

        // aggregate - m should equal (1/n) sum n_i (u_i - u_hat_i) whenever the
        // attacker's count estimates are exact and nothing was altered.
        let identity_residual = (paired && untouched_by_defense && !trace.clipped).then(|| {
            let n: usize = contributions.iter().map(|c| c.update.reported_count).sum();
            let mut predicted_error = ParameterVector::zeros(aggregate.len());
            for (u, p) in honest.iter().zip(&trace.predicted) {
                let diff = u.delta.sub(&p.delta).expect("lengths checked");
                predicted_error
                    .axpy(u.reported_count as f64 / n as f64, &diff)
                    .expect("lengths checked");
            }
            let observed = aggregate.sub(&target.delta).expect("lengths checked");
            observed
                .max_abs_diff(&predicted_error)
                .expect("lengths checked")
        });

        Some(AttackDiagnostics {
            malicious_norm: attacker.update.delta.norm(),
            unclipped_malicious_norm: trace.unclipped_norm,
            target_norm: target.delta.norm(),
            honest_norms,
            aggregate_target_distance: aggregate
                .max_abs_diff(&target.delta)
                .expect("lengths checked"),
            prediction_error,
            identity_residual,
        })
    }
}
