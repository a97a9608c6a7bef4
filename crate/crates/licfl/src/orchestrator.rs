//! The federation round loop.
//!
//! Round 1 bootstraps: broadcast one initial model to every client, collect
//! the locally trained parameters, aggregate them into a single global
//! model, and run the configured cohorting on the collected updates. Every
//! cohort starts from that global model. From round 2 on, each cohort
//! trains and aggregates independently; parameters never cross cohort
//! boundaries again.
//!
//! Everything is a pure function of (config, datasets, master seed):
//! per-client per-round seeds derive from stable hashing, aggregation
//! walks clients in ascending-id order, and client training may run on any
//! number of threads without changing a single bit of the output.

use crate::aggregation::{
    adaptive_select, compute_delta, compute_delta_weighted, fedavg_weighted, qfedavg_step,
    strategy_step, AdaptiveStates, ClientUpdate, ClientUpdateSet, ServerHyper, StrategyKind,
    StrategyState,
};
use crate::cohorting::{
    cohort, moment_cohort, primary_cohort, CohortAssignment, CohortConfig,
};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{client_update, forward, init_params, mean_loss, NetworkSpec, ParamVector};
use crate::{subseed, ClientId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// One simulated participant.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: ClientId,
    pub data: ClientDataset,
}

/// How the server combines client updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// One strategy for every round.
    Fixed(StrategyKind),
    /// Per-round selection among the adaptive candidate set.
    Adaptive,
}

/// How clients are grouped after round 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortingMode {
    /// Single cohort: plain federated learning.
    None,
    /// Group by metadata equality on the given fields.
    Primary { keys: Vec<String> },
    /// Spectral clustering of round-1 model parameters.
    Licfl(CohortConfig),
    /// Metadata grouping first, parameter-based cohorting inside each group.
    PrimaryLicfl {
        keys: Vec<String>,
        cohort: CohortConfig,
    },
    /// Moment-sharing baseline.
    Moments { k: usize },
}

/// Federation-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_lr: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationMode,
    #[serde(default = "default_cohorting")]
    pub cohorting: CohortingMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub server: ServerHyper,
    /// Fairness exponent for the fixed q-averaging strategy.
    #[serde(default = "default_q_param")]
    pub q_param: f64,
    #[serde(default = "default_lipschitz")]
    pub lipschitz: f64,
    /// Weight the drift by sample counts instead of the plain client mean.
    #[serde(default)]
    pub weighted_delta: bool,
}

fn default_q_param() -> f64 {
    0.1
}

fn default_lipschitz() -> f64 {
    1.0
}

fn default_local_epochs() -> usize {
    1
}

fn default_batch_size() -> usize {
    32
}

fn default_aggregation() -> AggregationMode {
    AggregationMode::Fixed(StrategyKind::FedAvg)
}

fn default_cohorting() -> CohortingMode {
    CohortingMode::None
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::config("num_clients must be >= 2"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if !self.local_lr.is_finite() || self.local_lr < 0.0 {
            return Err(Error::config("local_lr must be finite and >= 0"));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("local_epochs and batch_size must be >= 1"));
        }
        if !(self.q_param >= 0.0) || !(self.lipschitz > 0.0) {
            return Err(Error::config("q_param must be >= 0 and lipschitz > 0"));
        }
        self.network.validate()?;
        self.server.validate()?;
        if let CohortingMode::Licfl(c) | CohortingMode::PrimaryLicfl { cohort: c, .. } =
            &self.cohorting
        {
            c.validate()?;
        }
        if let CohortingMode::Moments { k } = &self.cohorting {
            if *k == 0 {
                return Err(Error::config("moments k must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Per-cohort aggregation state.
#[derive(Debug, Clone)]
pub enum StrategyBank {
    Fixed(StrategyState),
    Adaptive(AdaptiveStates),
}

/// Current model and optimizer state for every cohort.
#[derive(Debug, Clone)]
pub struct CohortModelRegistry {
    entries: BTreeMap<usize, CohortEntry>,
}

#[derive(Debug, Clone)]
pub struct CohortEntry {
    pub theta: ParamVector,
    pub bank: StrategyBank,
}

impl CohortModelRegistry {
    fn bootstrap(
        assignment: &CohortAssignment,
        theta: &ParamVector,
        cfg: &FederationConfig,
    ) -> CohortModelRegistry {
        let entries = (0..assignment.num_cohorts())
            .map(|j| {
                let bank = match cfg.aggregation {
                    AggregationMode::Adaptive => StrategyBank::Adaptive(AdaptiveStates::new(
                        theta.clone(),
                        cfg.server,
                    )),
                    AggregationMode::Fixed(_) => {
                        StrategyBank::Fixed(StrategyState::new(theta.clone(), cfg.server))
                    }
                };
                (
                    j,
                    CohortEntry {
                        theta: theta.clone(),
                        bank,
                    },
                )
            })
            .collect();
        CohortModelRegistry { entries }
    }

    pub fn theta(&self, cohort: usize) -> Option<&ParamVector> {
        self.entries.get(&cohort).map(|e| &e.theta)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &CohortEntry)> {
        self.entries.iter()
    }
}

/// Per-round record: what each cohort chose and how every client scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub cohorts: Vec<CohortRoundLog>,
    /// Mean test MSE over all clients under their cohort models.
    pub global_mse: f64,
    pub clients: Vec<ClientEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRoundLog {
    pub cohort: usize,
    pub chosen: StrategyKind,
    /// Selection scores, present only for adaptive rounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<StrategyKind, f64>>,
    /// Mean test MSE of the cohort's members.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: ClientId,
    pub mse: f64,
    pub f1: f64,
}

/// Classification threshold used for every F1 evaluation.
pub const EVAL_THRESHOLD: f64 = 0.5;

/// Optional side effects of a federation run.
#[derive(Debug, Default)]
pub struct RunHooks {
    /// Write per-cohort checkpoints into this directory every `interval`
    /// rounds (`interval` 0 means final round only).
    pub checkpoint: Option<(PathBuf, usize)>,
}

/// Everything a finished federation produced.
#[derive(Debug)]
pub struct FederationOutcome {
    pub rounds: Vec<RoundLog>,
    pub assignment: CohortAssignment,
    pub final_models: BTreeMap<usize, ParamVector>,
}

fn train_clients(
    clients: &[&Client],
    theta: &ParamVector,
    cfg: &FederationConfig,
    round: usize,
) -> Result<(ClientUpdateSet, Vec<f64>)> {
    // Only the q-fair strategy consumes per-client broadcast losses.
    let need_losses = cfg.aggregation == AggregationMode::Fixed(StrategyKind::QFedAvg);
    // Each client is independent; results land in input order, so the
    // thread schedule cannot affect the output.
    let trained: Vec<(ClientUpdate, f64)> = clients
        .par_iter()
        .map(|client| {
            let ctx = |e: Error| e.with_context(&format!("round {round}, client {}", client.id));
            let seed = subseed(cfg.seed, client.id, round as u64);
            let params = client_update(
                theta,
                client.data.train(),
                cfg.local_lr,
                cfg.local_epochs,
                cfg.batch_size,
                seed,
            )
            .map_err(ctx)?;
            let broadcast_loss = if need_losses {
                mean_loss(theta, client.data.train()).map_err(ctx)?
            } else {
                0.0
            };
            Ok((
                ClientUpdate {
                    client_id: client.id,
                    params,
                    num_samples: client.data.train().len(),
                },
                broadcast_loss,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut updates = Vec::with_capacity(trained.len());
    let mut losses_by_id: Vec<(ClientId, f64)> = Vec::with_capacity(trained.len());
    for (u, loss) in trained {
        losses_by_id.push((u.client_id, loss));
        updates.push(u);
    }
    // Losses aligned with the set's ascending-id order.
    losses_by_id.sort_by_key(|(id, _)| *id);
    let losses = losses_by_id.into_iter().map(|(_, l)| l).collect();
    Ok((ClientUpdateSet::new(updates)?, losses))
}

fn run_cohorting(
    cfg: &FederationConfig,
    clients: &[Client],
    updates: &ClientUpdateSet,
) -> Result<CohortAssignment> {
    let metas: BTreeMap<ClientId, crate::data::MetaInfo> = clients
        .iter()
        .map(|c| (c.id, c.data.meta.clone()))
        .collect();
    match &cfg.cohorting {
        CohortingMode::None => CohortAssignment::single(clients.iter().map(|c| c.id)),
        CohortingMode::Primary { keys } => primary_cohort(&metas, keys),
        CohortingMode::Licfl(ccfg) => cohort(updates, ccfg),
        CohortingMode::PrimaryLicfl { keys, cohort: ccfg } => {
            let primary = primary_cohort(&metas, keys)?;
            let mut labels: BTreeMap<ClientId, usize> = BTreeMap::new();
            let mut next = 0usize;
            for group in 0..primary.num_cohorts() {
                let members = primary.members(group);
                if members.len() == 1 {
                    labels.insert(members[0], next);
                    next += 1;
                    continue;
                }
                let sub_updates = updates.subset(&members)?;
                let mut sub_cfg = ccfg.clone();
                if let Some(k) = sub_cfg.k_cohorts {
                    sub_cfg.k_cohorts = Some(k.min(members.len()));
                }
                let sub = cohort(&sub_updates, &sub_cfg)
                    .map_err(|e| e.with_context(&format!("primary group {group}")))?;
                for (client, label) in sub.labels() {
                    labels.insert(*client, next + label);
                }
                next += sub.num_cohorts();
            }
            CohortAssignment::from_labels(labels)
        }
        CohortingMode::Moments { k } => {
            let datasets: Vec<&ClientDataset> = clients.iter().map(|c| &c.data).collect();
            // Seed lane that no (client, round) pair can collide with.
            moment_cohort(&datasets, *k, subseed(cfg.seed, ClientId::MAX, 0))
        }
    }
}

/// Round-1 bootstrap: train everyone from `theta0`, aggregate one global
/// model, cohort the update set, and seed every cohort's model with the
/// global aggregate.
pub fn run_round_one(
    clients: &[Client],
    theta0: &ParamVector,
    cfg: &FederationConfig,
) -> Result<(CohortAssignment, CohortModelRegistry, ClientUpdateSet)> {
    let refs: Vec<&Client> = clients.iter().collect();
    let (updates, _) = train_clients(&refs, theta0, cfg, 1)?;
    let theta = fedavg_weighted(&updates).map_err(|e| e.with_context("round 1 aggregation"))?;
    let assignment =
        run_cohorting(cfg, clients, &updates).map_err(|e| e.with_context("round 1 cohorting"))?;
    let registry = CohortModelRegistry::bootstrap(&assignment, &theta, cfg);
    Ok((assignment, registry, updates))
}

/// Per-cohort outcome of one round: cohort index, applied strategy, and the
/// selection scores when the round was adaptive.
pub type CohortRoundRecord = (usize, StrategyKind, Option<BTreeMap<StrategyKind, f64>>);

/// One cohort-wise training round (round index `r >= 2`).
///
/// Returns the per-cohort strategy/score records; evaluation happens
/// separately so the log sees the post-round models.
pub fn run_cohort_round(
    registry: &mut CohortModelRegistry,
    assignment: &CohortAssignment,
    clients: &[Client],
    cfg: &FederationConfig,
    r: usize,
) -> Result<Vec<CohortRoundRecord>> {
    if r < 2 {
        return Err(Error::contract("cohort rounds start at r = 2"));
    }
    let by_id: BTreeMap<ClientId, &Client> = clients.iter().map(|c| (c.id, c)).collect();
    let mut records = Vec::with_capacity(assignment.num_cohorts());

    for j in 0..assignment.num_cohorts() {
        let ctx = |e: Error| e.with_context(&format!("round {r}, cohort {j}"));
        let members = assignment.members(j);
        let member_clients: Vec<&Client> = members
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("cohort {j} references client {id}")))
            })
            .collect::<Result<Vec<_>>>()?;

        let entry = registry.entries.get_mut(&j).expect("registry covers cohorts");
        let (updates, broadcast_losses) = train_clients(&member_clients, &entry.theta, cfg, r)?;

        let (new_theta, kind, scores) = match (&mut entry.bank, cfg.aggregation) {
            (StrategyBank::Fixed(state), AggregationMode::Fixed(kind)) => {
                let theta = match kind {
                    StrategyKind::FedAvg => fedavg_weighted(&updates).map_err(ctx)?,
                    StrategyKind::QFedAvg => qfedavg_step(
                        state,
                        &updates,
                        &broadcast_losses,
                        cfg.q_param,
                        cfg.lipschitz,
                    )
                    .map_err(ctx)?,
                    momentum => {
                        let delta = if cfg.weighted_delta {
                            compute_delta_weighted(&updates, &state.theta_prev)
                        } else {
                            compute_delta(&updates, &state.theta_prev)
                        }
                        .map_err(ctx)?;
                        let (theta, next) = strategy_step(state, momentum, &delta).map_err(ctx)?;
                        *state = next;
                        theta
                    }
                };
                state.theta_prev = theta.clone();
                (theta, kind, None)
            }
            (StrategyBank::Adaptive(states), AggregationMode::Adaptive) => {
                let theta_prev = entry.theta.clone();
                let (theta, record, next) =
                    adaptive_select(&updates, states, &theta_prev).map_err(ctx)?;
                *states = next;
                (theta, record.chosen, Some(record.scores))
            }
            _ => {
                return Err(Error::contract(
                    "registry bank does not match the aggregation mode",
                ))
            }
        };
        entry.theta = new_theta;
        records.push((j, kind, scores));
    }
    Ok(records)
}

/// Evaluates every client's test split under its cohort's current model.
fn evaluate(
    registry: &CohortModelRegistry,
    assignment: &CohortAssignment,
    clients: &[Client],
) -> Result<(f64, Vec<ClientEval>, BTreeMap<usize, f64>)> {
    let evals: Vec<(usize, ClientEval)> = clients
        .par_iter()
        .map(|client| {
            let cohort = assignment
                .cohort_of(client.id)
                .ok_or_else(|| Error::contract(format!("client {} unassigned", client.id)))?;
            let theta = registry
                .theta(cohort)
                .ok_or_else(|| Error::contract(format!("cohort {cohort} has no model")))?;
            let mut preds = Vec::with_capacity(client.data.test().len());
            let mut labels = Vec::with_capacity(client.data.test().len());
            for w in client.data.test() {
                preds.push(forward(theta, &w.x)?);
                labels.push(w.y);
            }
            let report = metrics::eval_report(&preds, &labels, EVAL_THRESHOLD)?;
            Ok((
                cohort,
                ClientEval {
                    client_id: client.id,
                    mse: report.mse,
                    f1: report.f1,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut client_evals: Vec<ClientEval> = evals.iter().map(|(_, e)| e.clone()).collect();
    client_evals.sort_by_key(|e| e.client_id);
    let global_mse =
        client_evals.iter().map(|e| e.mse).sum::<f64>() / client_evals.len() as f64;

    let mut cohort_losses: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (cohort, e) in &evals {
        let slot = cohort_losses.entry(*cohort).or_insert((0.0, 0));
        slot.0 += e.mse;
        slot.1 += 1;
    }
    let cohort_losses = cohort_losses
        .into_iter()
        .map(|(j, (sum, n))| (j, sum / n as f64))
        .collect();
    Ok((global_mse, client_evals, cohort_losses))
}

fn write_checkpoints(
    registry: &CohortModelRegistry,
    dir: &std::path::Path,
    round: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (j, entry) in registry.iter() {
        entry
            .theta
            .save(&dir.join(format!("cohort{j}_round{round}.params")))?;
    }
    Ok(())
}

/// Runs the full federation: bootstrap round, then cohort rounds, with an
/// evaluation after every round. Deterministic for a fixed config and
/// client list.
pub fn run_federation(
    cfg: &FederationConfig,
    clients: &[Client],
    hooks: &RunHooks,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if clients.len() != cfg.num_clients {
        return Err(Error::config(format!(
            "num_clients is {} but {} client datasets were supplied",
            cfg.num_clients,
            clients.len()
        )));
    }
    let mut sorted_ids: Vec<ClientId> = clients.iter().map(|c| c.id).collect();
    sorted_ids.sort_unstable();
    sorted_ids.dedup();
    if sorted_ids.len() != clients.len() {
        return Err(Error::contract("duplicate client ids"));
    }

    let theta0 = init_params(&cfg.network, cfg.seed)?;
    let (assignment, mut registry, _) = run_round_one(clients, &theta0, cfg)?;

    let mut rounds = Vec::with_capacity(cfg.rounds);
    let (global_mse, client_evals, cohort_losses) = evaluate(&registry, &assignment, clients)?;
    rounds.push(RoundLog {
        round: 1,
        cohorts: (0..assignment.num_cohorts())
            .map(|j| CohortRoundLog {
                cohort: j,
                chosen: StrategyKind::FedAvg,
                scores: None,
                loss: cohort_losses[&j],
            })
            .collect(),
        global_mse,
        clients: client_evals,
    });
    maybe_checkpoint(&registry, hooks, 1, cfg.rounds)?;

    for r in 2..=cfg.rounds {
        let records = run_cohort_round(&mut registry, &assignment, clients, cfg, r)?;
        let (global_mse, client_evals, cohort_losses) =
            evaluate(&registry, &assignment, clients)?;
        rounds.push(RoundLog {
            round: r,
            cohorts: records
                .into_iter()
                .map(|(j, chosen, scores)| CohortRoundLog {
                    cohort: j,
                    chosen,
                    scores,
                    loss: cohort_losses[&j],
                })
                .collect(),
            global_mse,
            clients: client_evals,
        });
        maybe_checkpoint(&registry, hooks, r, cfg.rounds)?;
    }

    let final_models = registry
        .iter()
        .map(|(j, e)| (*j, e.theta.clone()))
        .collect();
    Ok(FederationOutcome {
        rounds,
        assignment,
        final_models,
    })
}

fn maybe_checkpoint(
    registry: &CohortModelRegistry,
    hooks: &RunHooks,
    round: usize,
    total: usize,
) -> Result<()> {
    if let Some((dir, interval)) = &hooks.checkpoint {
        let due = round == total || (*interval > 0 && round % interval == 0);
        if due {
            write_checkpoints(registry, dir, round)?;
        }
    }
    Ok(())
}
