//! Federated averaging over simulated clients.
//!
//! Each client fits a linear autoregression on its own meters:
//! `kWh(t) ≈ w0·kWh(t−1) + w1·kWh(t−96) + w2·hour(t)/23 + w3`. Training is
//! full-batch gradient descent on mean squared error, so a FedAvg round with
//! one local step is exactly one centralized gradient step on the union.
//!
//! Secure aggregation encodes `n_i · w_i` in fixed point (10⁻⁶ units, wrapping
//! mod 2^64) and adds pairwise masks that cancel in the coordinator's sum.
//! Pairwise seeds come from a trusted harness; key agreement and dropout after
//! masking are not modelled.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dp::NoiseSource;
use crate::meterdata::{hour_of_day, FeederDataset, ReadingSeries};

/// lag-1, lag-96, scaled hour, bias.
pub const FEATURE_DIM: usize = 4;
/// Seasonal lag in intervals.
pub const SEASONAL_LAG: i64 = 96;
/// Every `HOLDOUT_STRIDE`-th example of a series is held out for evaluation.
pub const HOLDOUT_STRIDE: usize = 5;
/// Fixed-point units per weight unit.
pub const FIXED_POINT_SCALE: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("invalid round config: {0}")]
    InvalidConfig(String),
    #[error("client {0} has no training examples")]
    NoTrainingData(ClientId),
    #[error("no updates to aggregate")]
    EmptyUpdateList,
    #[error("weight dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("client {client} has no shared seed with peer {peer}")]
    MissingPeerSeed { client: ClientId, peer: ClientId },
    #[error("dp noise requires a clip norm")]
    ClipNormMissing,
    #[error("weights must be finite")]
    NonFinite,
    #[error("n_samples must be at least 1")]
    ZeroSamples,
    #[error("fixed-point encoding overflowed")]
    FixedPointOverflow,
    #[error("update payloads cannot be combined: {0}")]
    PayloadMismatch(String),
    #[error("no client could train in round {0}")]
    NoParticipants(usize),
    #[error("at least one client shard is required")]
    NoClients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(weights: Vec<f64>) -> Result<Self, FedError> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FedError::NonFinite);
        }
        Ok(ModelParams(weights))
    }

    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn predict(&self, x: &[f64; FEATURE_DIM]) -> f64 {
        self.0.iter().zip(x).map(|(w, x)| w * x).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UpdatePayload {
    Plain(ModelParams),
    /// `n_i · round(w_i · 10⁶)` per coordinate as wrapping u64, optionally masked.
    Encoded { words: Vec<u64>, masked: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    client_id: ClientId,
    payload: UpdatePayload,
    n_samples: u64,
}

impl ClientUpdate {
    pub fn new(client_id: ClientId, weights: ModelParams, n_samples: u64) -> Result<Self, FedError> {
        if n_samples == 0 {
            return Err(FedError::ZeroSamples);
        }
        Ok(ClientUpdate { client_id, payload: UpdatePayload::Plain(weights), n_samples })
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn payload(&self) -> &UpdatePayload {
        &self.payload
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn is_masked(&self) -> bool {
        matches!(self.payload, UpdatePayload::Encoded { masked: true, .. })
    }

    /// Plain weights, if the update has not been encoded.
    pub fn weights(&self) -> Option<&ModelParams> {
        match &self.payload {
            UpdatePayload::Plain(w) => Some(w),
            UpdatePayload::Encoded { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Floating-point weighted mean.
    Plain,
    /// Fixed-point weighted mean without masks.
    FixedPoint,
    /// Fixed-point weighted mean over pairwise-masked updates.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    rounds: usize,
    local_steps: usize,
    learning_rate: f64,
    clip_norm: Option<f64>,
    dp_sigma: f64,
    aggregation: Aggregation,
}

impl RoundConfig {
    pub fn new(rounds: usize, local_steps: usize, learning_rate: f64) -> Result<Self, FedError> {
        if rounds == 0 {
            return Err(FedError::InvalidConfig("rounds must be at least 1".into()));
        }
        if local_steps == 0 {
            return Err(FedError::InvalidConfig("local_steps must be at least 1".into()));
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(FedError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(RoundConfig { rounds, local_steps, learning_rate, clip_norm: None, dp_sigma: 0.0, aggregation: Aggregation::Plain })
    }

    pub fn with_clip_norm(mut self, clip_norm: f64) -> Result<Self, FedError> {
        if !(clip_norm.is_finite() && clip_norm > 0.0) {
            return Err(FedError::InvalidConfig("clip_norm must be positive".into()));
        }
        self.clip_norm = Some(clip_norm);
        Ok(self)
    }

    pub fn with_dp_sigma(mut self, dp_sigma: f64) -> Result<Self, FedError> {
        if !(dp_sigma.is_finite() && dp_sigma >= 0.0) {
            return Err(FedError::InvalidConfig("dp_sigma must be non-negative".into()));
        }
        if dp_sigma > 0.0 && self.clip_norm.is_none() {
            return Err(FedError::ClipNormMissing);
        }
        self.dp_sigma = dp_sigma;
        Ok(self)
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn local_steps(&self) -> usize {
        self.local_steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn clip_norm(&self) -> Option<f64> {
        self.clip_norm
    }

    pub fn dp_sigma(&self) -> f64 {
        self.dp_sigma
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: [f64; FEATURE_DIM],
    pub target: f64,
}

/// All examples of one series, in time order. An interval yields an example
/// when both lagged readings are present.
pub fn extract_examples(series: &ReadingSeries) -> Vec<Example> {
    let Some(interval) = series.interval_s().map(i64::from) else {
        return Vec::new();
    };
    let by_ts: HashMap<i64, f64> =
        series.readings().iter().map(|r| (r.timestamp(), r.energy().kwh())).collect();
    series
        .readings()
        .iter()
        .filter_map(|r| {
            let t = r.timestamp();
            let lag1 = *by_ts.get(&(t - interval))?;
            let lag96 = *by_ts.get(&(t - SEASONAL_LAG * interval))?;
            let hour = hour_of_day(t) as f64 / 23.0;
            Some(Example { features: [lag1, lag96, hour, 1.0], target: r.energy().kwh() })
        })
        .collect()
}

/// Splits one series' examples into (train, holdout).
pub fn split_examples(examples: Vec<Example>) -> (Vec<Example>, Vec<Example>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        if i % HOLDOUT_STRIDE == HOLDOUT_STRIDE - 1 {
            holdout.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, holdout)
}

/// A client's private data. Only [`local_train`] and [`holdout_loss`] read it.
#[derive(Debug, Clone)]
pub struct ClientShard {
    id: ClientId,
    train: Vec<Example>,
    holdout: Vec<Example>,
}

impl ClientShard {
    pub fn new(id: ClientId, series: &[ReadingSeries]) -> Self {
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for s in series {
            let (t, h) = split_examples(extract_examples(s));
            train.extend(t);
            holdout.extend(h);
        }
        ClientShard { id, train, holdout }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn holdout_len(&self) -> usize {
        self.holdout.len()
    }
}

/// Assigns meters (in id order) to `k` shards round-robin.
pub fn shard_round_robin(dataset: &FeederDataset, k: usize) -> Result<Vec<ClientShard>, FedError> {
    if k == 0 {
        return Err(FedError::NoClients);
    }
    let mut groups: Vec<Vec<ReadingSeries>> = vec![Vec::new(); k];
    for (i, s) in dataset.series().iter().enumerate() {
        groups[i % k].push(s.clone());
    }
    Ok(groups.iter().enumerate().map(|(i, g)| ClientShard::new(ClientId(i as u32), g)).collect())
}

fn check_dim(expected: usize, found: usize) -> Result<(), FedError> {
    if expected != found {
        return Err(FedError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// (2/n) Σ (w·x − y) x.
fn mse_gradient(w: &[f64], examples: &[Example]) -> [f64; FEATURE_DIM] {
    let mut grad = [0.0; FEATURE_DIM];
    for ex in examples {
        let residual: f64 = w.iter().zip(&ex.features).map(|(w, x)| w * x).sum::<f64>() - ex.target;
        for (g, x) in grad.iter_mut().zip(&ex.features) {
            *g += residual * x;
        }
    }
    let scale = 2.0 / examples.len() as f64;
    grad.map(|g| g * scale)
}

/// Runs `local_steps` full-batch gradient steps from the global weights.
pub fn local_train(shard: &ClientShard, global: &ModelParams, cfg: &RoundConfig) -> Result<ClientUpdate, FedError> {
    check_dim(FEATURE_DIM, global.dim())?;
    if shard.train.is_empty() {
        return Err(FedError::NoTrainingData(shard.id));
    }
    let mut w = global.0.clone();
    for _ in 0..cfg.local_steps {
        let grad = mse_gradient(&w, &shard.train);
        for (w, g) in w.iter_mut().zip(grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    ClientUpdate::new(shard.id, ModelParams::new(w)?, shard.train.len() as u64)
}

/// Sum of squared errors and example count on the client's holdout split.
pub fn holdout_loss(shard: &ClientShard, model: &ModelParams) -> (f64, usize) {
    let sse = shard
        .holdout
        .iter()
        .map(|ex| {
            let r = model.predict(&ex.features) - ex.target;
            r * r
        })
        .sum();
    (sse, shard.holdout.len())
}

/// w = Σ n_i w_i / Σ n_j over plain updates.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ModelParams, FedError> {
    let first = updates.first().ok_or(FedError::EmptyUpdateList)?;
    let dim = first.weights().ok_or_else(|| FedError::PayloadMismatch("fed_avg needs plain updates".into()))?.dim();
    let total: f64 = updates.iter().map(|u| u.n_samples as f64).sum();
    let mut acc = vec![0.0; dim];
    for u in updates {
        let w = u.weights().ok_or_else(|| FedError::PayloadMismatch("fed_avg needs plain updates".into()))?;
        check_dim(dim, w.dim())?;
        let share = u.n_samples as f64 / total;
        for (a, w) in acc.iter_mut().zip(w.weights()) {
            *a += share * w;
        }
    }
    ModelParams::new(acc)
}

/// Encodes `n_i · w_i` in fixed point without masking.
pub fn encode_update(update: &ClientUpdate) -> Result<ClientUpdate, FedError> {
    let w = match &update.payload {
        UpdatePayload::Plain(w) => w,
        UpdatePayload::Encoded { .. } => return Ok(update.clone()),
    };
    let n = i64::try_from(update.n_samples).map_err(|_| FedError::FixedPointOverflow)?;
    let words = w
        .weights()
        .iter()
        .map(|&x| {
            let q = (x * FIXED_POINT_SCALE).round();
            if q.abs() >= 2f64.powi(62) {
                return Err(FedError::FixedPointOverflow);
            }
            (q as i64).checked_mul(n).map(|v| v as u64).ok_or(FedError::FixedPointOverflow)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClientUpdate { payload: UpdatePayload::Encoded { words, masked: false }, ..update.clone() })
}

pub type PairSeed = [u8; 32];

fn mask_stream(seed: &PairSeed, dim: usize) -> Vec<u64> {
    let mut prg = ChaCha8Rng::from_seed(*seed);
    (0..dim).map(|_| prg.next_u64()).collect()
}

/// Adds Σ_{j>i} PRG(s_ij) − Σ_{j<i} PRG(s_ij) to the encoded update.
///
/// `participants` is the fixed set for the round; `peer_seeds` holds this
/// client's seed with each other participant.
pub fn mask_update(
    update: &ClientUpdate,
    participants: &[ClientId],
    peer_seeds: &BTreeMap<ClientId, PairSeed>,
) -> Result<ClientUpdate, FedError> {
    if update.is_masked() {
        return Err(FedError::PayloadMismatch("update is already masked".into()));
    }
    let me = update.client_id;
    let encoded = encode_update(update)?;
    let UpdatePayload::Encoded { mut words, .. } = encoded.payload else {
        unreachable!("encode_update returns an encoded payload");
    };
    for &peer in participants.iter().filter(|&&p| p != me) {
        let seed = peer_seeds.get(&peer).ok_or(FedError::MissingPeerSeed { client: me, peer })?;
        let stream = mask_stream(seed, words.len());
        for (w, m) in words.iter_mut().zip(stream) {
            *w = if peer > me { w.wrapping_add(m) } else { w.wrapping_sub(m) };
        }
    }
    Ok(ClientUpdate { payload: UpdatePayload::Encoded { words, masked: true }, ..update.clone() })
}

/// Wrapping sum of encoded updates, decoded and divided by Σ n_j.
///
/// The coordinator only touches the sum; individual masked words are
/// indistinguishable from uniform.
pub fn secure_aggregate(updates: &[ClientUpdate]) -> Result<ModelParams, FedError> {
    let first = updates.first().ok_or(FedError::EmptyUpdateList)?;
    let (dim, masked) = match &first.payload {
        UpdatePayload::Encoded { words, masked } => (words.len(), *masked),
        UpdatePayload::Plain(_) => return Err(FedError::PayloadMismatch("expected encoded updates".into())),
    };
    let mut sum = vec![0u64; dim];
    let mut total: u64 = 0;
    for u in updates {
        match &u.payload {
            UpdatePayload::Encoded { words, masked: m } if *m == masked => {
                check_dim(dim, words.len())?;
                for (s, w) in sum.iter_mut().zip(words) {
                    *s = s.wrapping_add(*w);
                }
            }
            _ => return Err(FedError::PayloadMismatch("mixed masked and unmasked updates".into())),
        }
        total = total.checked_add(u.n_samples).ok_or(FedError::FixedPointOverflow)?;
    }
    let total = total as f64;
    ModelParams::new(sum.into_iter().map(|s| (s as i64) as f64 / FIXED_POINT_SCALE / total).collect())
}

/// Clips to `clip_norm` then adds N(0, dp_sigma²) per coordinate.
pub fn dp_noise_update<N: NoiseSource + ?Sized>(
    update: &ClientUpdate,
    cfg: &RoundConfig,
    noise: &mut N,
) -> Result<ClientUpdate, FedError> {
    let clip = cfg.clip_norm.ok_or(FedError::ClipNormMissing)?;
    let w = update
        .weights()
        .ok_or_else(|| FedError::PayloadMismatch("dp noise applies to plain updates".into()))?;
    let norm = w.norm();
    let factor = if norm > clip { clip / norm } else { 1.0 };
    let noisy = w
        .weights()
        .iter()
        .map(|&x| {
            let scaled = x * factor;
            if cfg.dp_sigma > 0.0 {
                scaled + cfg.dp_sigma * noise.standard_normal()
            } else {
                scaled
            }
        })
        .collect();
    ClientUpdate::new(update.client_id, ModelParams::new(noisy)?, update.n_samples)
}

fn derive_seed(tag: &[u8], seed: u64, round: usize, a: u32, b: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_be_bytes());
    h.update((round as u64).to_be_bytes());
    h.update(a.to_be_bytes());
    h.update(b.to_be_bytes());
    h.finalize().into()
}

/// Per-client RNG for a round, independent of scheduling order.
pub fn client_rng(seed: u64, client: ClientId, round: usize) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(b"gridveil/fed/client", seed, round, client.0, 0))
}

/// Trusted-setup pairwise seeds for one round.
#[derive(Debug, Clone)]
pub struct PairwiseSeeds {
    seeds: BTreeMap<(ClientId, ClientId), PairSeed>,
}

impl PairwiseSeeds {
    pub fn generate(participants: &[ClientId], seed: u64, round: usize) -> Self {
        let mut seeds = BTreeMap::new();
        for (i, &a) in participants.iter().enumerate() {
            for &b in &participants[i + 1..] {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                seeds.insert((lo, hi), derive_seed(b"gridveil/fed/pair", seed, round, lo.0, hi.0));
            }
        }
        PairwiseSeeds { seeds }
    }

    /// The seeds `client` shares with each peer.
    pub fn for_client(&self, client: ClientId) -> BTreeMap<ClientId, PairSeed> {
        self.seeds
            .iter()
            .filter_map(|(&(a, b), s)| {
                if a == client {
                    Some((b, *s))
                } else if b == client {
                    Some((a, *s))
                } else {
                    None
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: usize,
    pub n_samples: u64,
    /// Pooled holdout MSE of the new global model; `None` without holdout data.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationResult {
    pub final_model: ModelParams,
    /// Global model after each round.
    pub trajectory: Vec<ModelParams>,
    pub history: Vec<RoundMetrics>,
}

/// Pooled holdout MSE across all clients.
pub fn federated_mse(shards: &[ClientShard], model: &ModelParams) -> Option<f64> {
    let (sse, n) = shards
        .iter()
        .map(|s| holdout_loss(s, model))
        .fold((0.0, 0usize), |(a, n), (b, m)| (a + b, n + m));
    (n > 0).then(|| sse / n as f64)
}

/// Runs `cfg.rounds` FedAvg rounds from zero weights.
///
/// Clients train concurrently within a round. Clients without training data
/// sit the round out and do not count toward Σ n_j.
pub fn run_federation(shards: &[ClientShard], cfg: &RoundConfig, seed: u64) -> Result<FederationResult, FedError> {
    if shards.is_empty() {
        return Err(FedError::NoClients);
    }
    if cfg.dp_sigma > 0.0 && cfg.clip_norm.is_none() {
        return Err(FedError::ClipNormMissing);
    }
    let mut global = ModelParams::zeros(FEATURE_DIM);
    let mut trajectory = Vec::with_capacity(cfg.rounds);
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let results: Vec<Result<ClientUpdate, FedError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| {
                    let global = &global;
                    scope.spawn(move || {
                        let update = local_train(shard, global, cfg)?;
                        if cfg.clip_norm.is_some() {
                            let mut rng = client_rng(seed, shard.id, round);
                            dp_noise_update(&update, cfg, &mut rng)
                        } else {
                            Ok(update)
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
        });
        let mut updates = Vec::new();
        for r in results {
            match r {
                Ok(u) => updates.push(u),
                Err(FedError::NoTrainingData(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if updates.is_empty() {
            return Err(FedError::NoParticipants(round));
        }
        let n_samples = updates.iter().map(|u| u.n_samples).sum();
        global = match cfg.aggregation {
            Aggregation::Plain => fed_avg(&updates)?,
            Aggregation::FixedPoint => {
                secure_aggregate(&updates.iter().map(encode_update).collect::<Result<Vec<_>, _>>()?)?
            }
            Aggregation::Masked => {
                let participants: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
                let seeds = PairwiseSeeds::generate(&participants, seed, round);
                let masked = updates
                    .iter()
                    .map(|u| mask_update(u, &participants, &seeds.for_client(u.client_id)))
                    .collect::<Result<Vec<_>, _>>()?;
                secure_aggregate(&masked)?
            }
        };
        history.push(RoundMetrics {
            round: round + 1,
            participants: updates.len(),
            n_samples,
            mse: federated_mse(shards, &global),
        });
        trajectory.push(global.clone());
    }
    Ok(FederationResult { final_model: global, trajectory, history })
}
