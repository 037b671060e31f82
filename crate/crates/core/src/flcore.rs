//! Federated rounds: client selection, local training dispatch, server
//! aggregation (FedAvg, FedAvgM, FedAdam) and evaluation of the global model.
//!
//! The pseudo-gradient of client `k` is `Δw_k = w_g - w_k`, so subtracting a
//! weighted average of deltas moves the global model toward the clients.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::metrics::{self, MetricError, RoundHistory, RoundRecord, TripletPrediction, RECALL_KS};
use crate::partition::PartitionPlan;
use crate::seed;
use crate::semantics::{AnnotationRecord, Triplet};
use crate::trainer::{self, argmax, LocalTrainConfig, ModelLayout, ModelParams, RelationExample, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("shape mismatch: expected {expected} parameters, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("client {0} has no data")]
    EmptyClient(usize),
    #[error("sample `{0}` in the plan is not in the dataset")]
    UnknownSample(String),
    #[error("client {client}: {source}")]
    Training { client: usize, source: TrainError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

type Result<T> = std::result::Result<T, FlError>;

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggregatorSpec {
    FedAvg,
    FedAvgM {
        beta: f64,
    },
    FedAdam {
        beta1: f64,
        beta2: f64,
        eta: f64,
        epsilon: f64,
    },
}

impl AggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(FlError::Config(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        match *self {
            AggregatorSpec::FedAvg => Ok(()),
            AggregatorSpec::FedAvgM { beta } => unit("beta", beta),
            AggregatorSpec::FedAdam {
                beta1,
                beta2,
                eta,
                epsilon,
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(FlError::Config(format!("eta must be positive, got {eta}")));
                }
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(FlError::Config(format!("epsilon must be positive, got {epsilon}")));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::FedAvg => "fedavg",
            AggregatorSpec::FedAvgM { .. } => "fedavgm",
            AggregatorSpec::FedAdam { .. } => "fedadam",
        }
    }
}

/// Global model and server optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ModelParams,
    /// FedAvgM momentum buffer.
    pub velocity: Vec<f64>,
    /// FedAdam first moment.
    pub first_moment: Vec<f64>,
    /// FedAdam second moment.
    pub second_moment: Vec<f64>,
    /// Completed rounds.
    pub round: usize,
}

impl ServerState {
    pub fn new(global: ModelParams) -> Self {
        let n = global.len();
        Self {
            global,
            velocity: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            round: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub total_rounds: usize,
    pub eval_every: usize,
    pub master_seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(FlError::Config("total_clients must be >= 1".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(FlError::Config(format!(
                "clients_per_round must be in [1, {}], got {}",
                self.total_clients, self.clients_per_round
            )));
        }
        if self.total_rounds == 0 {
            return Err(FlError::Config("total_rounds must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(FlError::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether 0-based `round_index` is evaluated; the last round always is.
    pub fn evaluates(&self, round_index: usize) -> bool {
        (round_index + 1) % self.eval_every == 0 || round_index + 1 == self.total_rounds
    }
}

/// A trained client model and its pseudo-gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub n_samples: usize,
    pub params: ModelParams,
    /// `global - params`.
    pub delta: Vec<f64>,
}

impl ClientUpdate {
    pub fn new(client_id: usize, n_samples: usize, global: &ModelParams, params: ModelParams) -> Result<Self> {
        if params.len() != global.len() {
            return Err(FlError::ShapeMismatch {
                expected: global.len(),
                found: params.len(),
            });
        }
        let delta = global
            .values()
            .iter()
            .zip(params.values())
            .map(|(g, w)| g - w)
            .collect();
        Ok(Self {
            client_id,
            n_samples,
            params,
            delta,
        })
    }
}

const SELECT_STREAM: u64 = 1;
const CLIENT_STREAM: u64 = 2;

/// `count` distinct clients out of `total`, uniform without replacement,
/// returned in ascending order.
pub fn select_clients(total: usize, count: usize, round_index: usize, master_seed: u64) -> Result<Vec<usize>> {
    if count > total {
        return Err(FlError::Config(format!("cannot select {count} of {total} clients")));
    }
    let mut rng = seed::rng(master_seed, &[SELECT_STREAM, round_index as u64]);
    let mut chosen = index::sample(&mut rng, total, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Updates in ascending client order with normalized weights `n_k / n`.
fn weighted(updates: &[ClientUpdate]) -> Result<Vec<(f64, &ClientUpdate)>> {
    let first = updates.first().ok_or(FlError::NoUpdates)?;
    if let Some(u) = updates.iter().find(|u| u.params.len() != first.params.len()) {
        return Err(FlError::ShapeMismatch {
            expected: first.params.len(),
            found: u.params.len(),
        });
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let n: usize = sorted.iter().map(|u| u.n_samples).sum();
    if n == 0 {
        return Err(FlError::Config("client sample counts sum to zero".into()));
    }
    Ok(sorted
        .into_iter()
        .map(|u| (u.n_samples as f64 / n as f64, u))
        .collect())
}

/// `Σ (n_k / n) w_k` over the participating clients.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let weights = weighted(updates)?;
    let layout = weights[0].1.params.layout();
    let mut out = vec![0.0; layout.param_count()];
    for (w, u) in weights {
        for (o, x) in out.iter_mut().zip(u.params.values()) {
            *o += w * x;
        }
    }
    Ok(ModelParams::from_vec(layout, out)?)
}

/// `Σ (n_k / n) Δw_k` over the participating clients.
pub fn pseudo_gradient(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let weights = weighted(updates)?;
    let mut out = vec![0.0; weights[0].1.delta.len()];
    for (w, u) in weights {
        if u.delta.len() != out.len() {
            return Err(FlError::ShapeMismatch {
                expected: out.len(),
                found: u.delta.len(),
            });
        }
        for (o, d) in out.iter_mut().zip(&u.delta) {
            *o += w * d;
        }
    }
    Ok(out)
}

fn check_state(state: &ServerState, delta: &[f64]) -> Result<()> {
    let n = state.global.len();
    for len in [delta.len(), state.velocity.len(), state.first_moment.len(), state.second_moment.len()] {
        if len != n {
            return Err(FlError::ShapeMismatch { expected: n, found: len });
        }
    }
    Ok(())
}

/// Server momentum: `v <- beta v + Σ (n_k/n) Δw_k`, `w_g <- w_g - v`.
pub fn server_update_fedavgm(state: &ServerState, updates: &[ClientUpdate], beta: f64) -> Result<ServerState> {
    let delta = pseudo_gradient(updates)?;
    check_state(state, &delta)?;
    let mut next = state.clone();
    for ((w, v), d) in next.global.values_mut().iter_mut().zip(&mut next.velocity).zip(&delta) {
        *v = beta * *v + d;
        *w -= *v;
    }
    next.round += 1;
    Ok(next)
}

/// Server Adam without bias correction:
/// `m <- β1 m + (1-β1) Δ`, `v <- β2 v + (1-β2) Δ²`, `w_g <- w_g - η m / (√v + ε)`.
pub fn server_update_fedadam(
    state: &ServerState,
    updates: &[ClientUpdate],
    beta1: f64,
    beta2: f64,
    eta: f64,
    epsilon: f64,
) -> Result<ServerState> {
    let delta = pseudo_gradient(updates)?;
    check_state(state, &delta)?;
    let mut next = state.clone();
    let params = next.global.values_mut();
    for (i, d) in delta.iter().enumerate() {
        let m = beta1 * next.first_moment[i] + (1.0 - beta1) * d;
        let v = beta2 * next.second_moment[i] + (1.0 - beta2) * d * d;
        next.first_moment[i] = m;
        next.second_moment[i] = v;
        params[i] -= eta * m / (v.sqrt() + epsilon);
    }
    next.round += 1;
    Ok(next)
}

/// Applies `spec` to the round's updates.
pub fn server_update(state: &ServerState, spec: &AggregatorSpec, updates: &[ClientUpdate]) -> Result<ServerState> {
    match *spec {
        AggregatorSpec::FedAvg => {
            let mut next = state.clone();
            next.global = aggregate_fedavg(updates)?;
            next.round += 1;
            Ok(next)
        }
        AggregatorSpec::FedAvgM { beta } => server_update_fedavgm(state, updates, beta),
        AggregatorSpec::FedAdam {
            beta1,
            beta2,
            eta,
            epsilon,
        } => server_update_fedadam(state, updates, beta1, beta2, eta, epsilon),
    }
}

/// One client's training set. `n_samples` counts annotated samples (images),
/// not relations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub examples: Vec<RelationExample>,
    pub n_samples: usize,
}

/// Featurizes the plan's per-client samples. `records` must be in
/// super-class space with the given `dims`.
pub fn build_client_data(
    plan: &PartitionPlan,
    records: &[AnnotationRecord],
    dims: [usize; 3],
) -> Result<Vec<ClientData>> {
    let by_id: BTreeMap<&str, &AnnotationRecord> = records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    plan.clients()
        .iter()
        .map(|ids| {
            let mut examples = Vec::new();
            for id in ids {
                let rec = by_id.get(id.as_str()).ok_or_else(|| FlError::UnknownSample(id.clone()))?;
                for &t in &rec.relations {
                    examples.push(trainer::featurize(t, dims)?);
                }
            }
            Ok(ClientData {
                examples,
                n_samples: ids.len(),
            })
        })
        .collect()
}

/// Loss, accuracy and recall metrics of a model on held-out scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Micro-aggregated R@K for K in [`RECALL_KS`].
    pub recall: [f64; 3],
    /// mR@K for K in [`RECALL_KS`].
    pub mean_recall: [f64; 3],
}

struct EvalScene {
    scene_id: String,
    /// Ordered (subject, object) candidate pairs.
    pairs: Vec<(usize, usize)>,
    truth: BTreeSet<Triplet>,
}

/// Held-out scenes prepared for repeated evaluation.
///
/// Accuracy and loss are computed per relation (predicate classification from
/// the subject and object classes). For recall, every annotated
/// subject-object pair of a scene is scored against every predicate, and the
/// resulting triplets are ranked by predicted probability.
pub struct EvalSet {
    dims: [usize; 3],
    examples: Vec<RelationExample>,
    scenes: Vec<EvalScene>,
}

impl EvalSet {
    pub fn new(scenes: &[AnnotationRecord], dims: [usize; 3]) -> Result<Self> {
        let mut examples = Vec::new();
        let mut prepared = Vec::with_capacity(scenes.len());
        for rec in scenes {
            for &t in &rec.relations {
                examples.push(trainer::featurize(t, dims)?);
            }
            let pairs: BTreeSet<(usize, usize)> = rec.relations.iter().map(|t| (t.subject, t.object)).collect();
            let pairs = pairs.into_iter().collect();
            prepared.push(EvalScene {
                scene_id: rec.sample_id.clone(),
                pairs,
                truth: rec.relations.iter().copied().collect(),
            });
        }
        if examples.is_empty() {
            return Err(FlError::Config("evaluation set has no relations".into()));
        }
        Ok(Self {
            dims,
            examples,
            scenes: prepared,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_relations(&self) -> usize {
        self.examples.len()
    }

    /// Ranked triplet predictions of `params` for every scene.
    pub fn predictions(&self, params: &ModelParams) -> Result<Vec<TripletPrediction>> {
        let mut feature = vec![0.0; self.dims[0] + self.dims[1]];
        self.scenes
            .iter()
            .map(|scene| {
                let mut scored = Vec::with_capacity(scene.pairs.len() * self.dims[2]);
                for &(s, o) in &scene.pairs {
                    feature.iter_mut().for_each(|x| *x = 0.0);
                    feature[s] = 1.0;
                    feature[self.dims[0] + o] = 1.0;
                    for (p, prob) in params.predict_proba(&feature)?.into_iter().enumerate() {
                        scored.push((Triplet::new(s, o, p), prob));
                    }
                }
                Ok(TripletPrediction::from_scores(scene.scene_id.clone(), scored))
            })
            .collect()
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<EvalMetrics> {
        let (loss, _) = trainer::loss_and_grad(params, &self.examples)?;
        let labels: Vec<usize> = self.examples.iter().map(|e| e.label).collect();
        let predicted = self
            .examples
            .iter()
            .map(|e| params.logits(&e.feature).map(|z| argmax(&z)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let accuracy = metrics::accuracy(&labels, &predicted)?;
        let preds = self.predictions(params)?;
        let truths: Vec<BTreeSet<Triplet>> = self.scenes.iter().map(|s| s.truth.clone()).collect();
        let mut recall = [0.0; 3];
        let mut mean_recall = [0.0; 3];
        for (i, &k) in RECALL_KS.iter().enumerate() {
            recall[i] = metrics::micro_recall_at_k(&truths, &preds, k)?;
            mean_recall[i] = metrics::mean_recall_at_k(&truths, &preds, k)?;
        }
        Ok(EvalMetrics {
            loss,
            accuracy,
            recall,
            mean_recall,
        })
    }
}

fn record_from(round: usize, m: Option<EvalMetrics>) -> RoundRecord {
    let mut r = RoundRecord {
        round,
        ..Default::default()
    };
    if let Some(m) = m {
        r.loss = Some(m.loss);
        r.acc = Some(m.accuracy);
        [r.r20, r.r50, r.r100] = m.recall.map(Some);
        [r.mr20, r.mr50, r.mr100] = m.mean_recall.map(Some);
    }
    r
}

/// Everything a federated run needs. Client data is borrowed immutably for
/// the whole run.
pub struct Simulation<'a> {
    pub clients: &'a [ClientData],
    pub eval: &'a EvalSet,
    pub rounds: RoundConfig,
    pub aggregator: AggregatorSpec,
    pub local: LocalTrainConfig,
    /// Fail on a selected client without data instead of skipping it.
    pub strict: bool,
    /// Record wall-clock milliseconds per round (makes histories non-reproducible).
    pub record_wall_time: bool,
}

pub struct SimulationOutcome {
    pub history: RoundHistory,
    pub state: ServerState,
}

impl Simulation<'_> {
    pub fn validate(&self) -> Result<()> {
        self.rounds.validate()?;
        self.aggregator.validate()?;
        self.local.validate()?;
        if self.clients.len() != self.rounds.total_clients {
            return Err(FlError::Config(format!(
                "plan has {} clients, federation declares {}",
                self.clients.len(),
                self.rounds.total_clients
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::for_dims(self.eval.dims())
    }

    pub fn initial_state(&self) -> ServerState {
        ServerState::new(ModelParams::zeros(self.layout()))
    }

    /// Seed of a client's local training in a round.
    pub fn client_seed(&self, client_id: usize, round_index: usize) -> u64 {
        seed::derive(
            self.rounds.master_seed,
            &[CLIENT_STREAM, client_id as u64, round_index as u64],
        )
    }

    /// Selects clients, trains them from the current global model, aggregates
    /// and evaluates when scheduled. `round_index` is 0-based.
    pub fn run_round(&self, state: &ServerState, round_index: usize) -> Result<(ServerState, RoundRecord)> {
        let start = Instant::now();
        let selected = select_clients(
            self.rounds.total_clients,
            self.rounds.clients_per_round,
            round_index,
            self.rounds.master_seed,
        )?;
        let mut active = Vec::with_capacity(selected.len());
        for &c in &selected {
            if self.clients[c].examples.is_empty() {
                if self.strict {
                    return Err(FlError::EmptyClient(c));
                }
                warn!(client = c, round = round_index + 1, "skipping client without data");
            } else {
                active.push(c);
            }
        }
        let updates = active
            .par_iter()
            .map(|&c| {
                let data = &self.clients[c];
                let trained = trainer::local_train(&state.global, &data.examples, &self.local, self.client_seed(c, round_index))
                    .map_err(|source| FlError::Training { client: c, source })?;
                ClientUpdate::new(c, data.n_samples, &state.global, trained)
            })
            .collect::<Result<Vec<_>>>()?;

        let next = if updates.is_empty() {
            let mut next = state.clone();
            next.round += 1;
            next
        } else {
            server_update(state, &self.aggregator, &updates)?
        };
        let metrics = if self.rounds.evaluates(round_index) {
            Some(self.eval.evaluate(&next.global)?)
        } else {
            None
        };
        let mut record = record_from(round_index + 1, metrics);
        record.is_final = round_index + 1 == self.rounds.total_rounds;
        if self.record_wall_time {
            record.wall_ms = Some(start.elapsed().as_millis() as u64);
        }
        Ok((next, record))
    }

    pub fn run(&self) -> Result<SimulationOutcome> {
        self.validate()?;
        let mut state = self.initial_state();
        let mut history = RoundHistory::default();
        for r in 0..self.rounds.total_rounds {
            let (next, record) = self.run_round(&state, r)?;
            state = next;
            history.records.push(record);
        }
        Ok(SimulationOutcome { history, state })
    }
}
