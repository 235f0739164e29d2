//! Central-model differential privacy for feeder statistics.
//!
//! Mechanisms add Laplace noise with scale Δ/ε (pure ε-DP) or Gaussian noise
//! with σ = Δ·√(2 ln(1.25/δ))/ε ((ε, δ)-DP, valid for ε ≤ 1). Queries run
//! over one interval of a [`FeederDataset`], where each household contributes
//! exactly one reading, so neighboring datasets differ by one household and
//! the dataset cap Δ_max bounds the sum sensitivity.
//!
//! Every released answer is charged to a [`BudgetLedger`] first. The ledger
//! uses basic composition: ε and δ add up across releases and the ε total may
//! never exceed the configured cap. A histogram over disjoint bins is charged
//! once (parallel composition). Anything computed from a [`DpAnswer`]
//! afterwards is post-processing and touches no ledger.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read};
use std::sync::Mutex;

use rand::distributions::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meterdata::{EnergyQuantity, FeederDataset};

/// Absolute slack when comparing cumulative ε against the cap.
const CAP_TOLERANCE: f64 = 1e-9;

/// Default ε cap for a ledger.
pub const DEFAULT_EPSILON_CAP: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("epsilon must be finite and positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("delta must lie in [0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("sensitivity must be finite and positive, got {0}")]
    InvalidSensitivity(f64),
    #[error("noise scale must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("uniform draw {0} is outside (0, 1)")]
    InvalidUniform(f64),
    #[error("the Laplace mechanism requires delta = 0")]
    DeltaNotZero,
    #[error("the Gaussian mechanism requires delta > 0")]
    DeltaZero,
    #[error("the Gaussian calibration is only valid for epsilon <= 1, got {0}")]
    EpsilonOutOfRange(f64),
    #[error("privacy budget exhausted: spent {spent}, requested {requested}, cap {cap}")]
    BudgetExhausted { spent: f64, requested: f64, cap: f64 },
    #[error("query over an empty set of records")]
    EmptyDataset,
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("ledger: {0}")]
    Ledger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, DpError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(DpError::InvalidEpsilon(epsilon));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(DpError::InvalidDelta(delta));
        }
        Ok(PrivacyParams { epsilon, delta })
    }

    /// Pure ε-DP parameters (δ = 0).
    pub fn pure(epsilon: f64) -> Result<Self, DpError> {
        PrivacyParams::new(epsilon, 0.0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Largest change one record can make to a query answer, in answer units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sensitivity(f64);

impl Sensitivity {
    pub fn new(delta_f: f64) -> Result<Self, DpError> {
        if !(delta_f.is_finite() && delta_f > 0.0) {
            return Err(DpError::InvalidSensitivity(delta_f));
        }
        Ok(Sensitivity(delta_f))
    }

    /// Sensitivity of a sum whose terms are capped at `cap` (in kWh).
    pub fn from_energy(cap: EnergyQuantity) -> Result<Self, DpError> {
        Sensitivity::new(cap.kwh())
    }

    /// Sensitivity of a record count.
    pub fn count() -> Self {
        Sensitivity(1.0)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Source of the randomness the mechanisms consume.
///
/// Any [`rand::Rng`] is a noise source; [`ScriptedNoise`] replays fixed draws.
pub trait NoiseSource {
    /// Uniform draw strictly inside (0, 1).
    fn uniform_open01(&mut self) -> f64;
    fn standard_normal(&mut self) -> f64;
}

impl<R: Rng + ?Sized> NoiseSource for R {
    fn uniform_open01(&mut self) -> f64 {
        self.sample(Open01)
    }

    fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

/// Replays pre-chosen uniform and normal draws, for reproducing exact answers.
///
/// Panics when a queue runs dry.
#[derive(Debug, Clone, Default)]
pub struct ScriptedNoise {
    uniforms: VecDeque<f64>,
    normals: VecDeque<f64>,
}

impl ScriptedNoise {
    pub fn uniforms(draws: impl IntoIterator<Item = f64>) -> Self {
        ScriptedNoise { uniforms: draws.into_iter().collect(), normals: VecDeque::new() }
    }

    pub fn normals(draws: impl IntoIterator<Item = f64>) -> Self {
        ScriptedNoise { uniforms: VecDeque::new(), normals: draws.into_iter().collect() }
    }

    pub fn remaining(&self) -> usize {
        self.uniforms.len() + self.normals.len()
    }
}

impl NoiseSource for ScriptedNoise {
    fn uniform_open01(&mut self) -> f64 {
        self.uniforms.pop_front().expect("scripted uniform draws exhausted")
    }

    fn standard_normal(&mut self) -> f64 {
        self.normals.pop_front().expect("scripted normal draws exhausted")
    }
}

/// Inverse-CDF Laplace(0, b) sample: `-b·sgn(u-½)·ln(1-2|u-½|)`.
pub fn laplace_sample(scale: f64, u: f64) -> Result<f64, DpError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(DpError::InvalidScale(scale));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(DpError::InvalidUniform(u));
    }
    let centered = u - 0.5;
    if centered == 0.0 {
        return Ok(0.0);
    }
    Ok(-scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln())
}

/// Laplace scale b = Δ/ε.
pub fn laplace_scale(sensitivity: Sensitivity, params: &PrivacyParams) -> f64 {
    sensitivity.0 / params.epsilon
}

/// Classical Gaussian calibration σ = Δ·√(2 ln(1.25/δ))/ε.
pub fn gaussian_sigma(sensitivity: Sensitivity, params: &PrivacyParams) -> Result<f64, DpError> {
    if params.delta == 0.0 {
        return Err(DpError::DeltaZero);
    }
    if params.epsilon > 1.0 {
        return Err(DpError::EpsilonOutOfRange(params.epsilon));
    }
    Ok(sensitivity.0 * (2.0 * (1.25 / params.delta).ln()).sqrt() / params.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Laplace,
    Gaussian,
}

/// A released noisy value together with everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpAnswer {
    pub value: f64,
    pub mechanism: Mechanism,
    pub params: PrivacyParams,
    pub sensitivity: Sensitivity,
    /// Laplace b or Gaussian σ actually used.
    pub noise_scale: f64,
    /// Ledger id the release was charged under; `None` for bare mechanism calls.
    pub query_id: Option<String>,
}

impl DpAnswer {
    /// Post-processing: applies `f` to the value without any budget charge.
    pub fn map_value(&self, f: impl FnOnce(f64) -> f64) -> DpAnswer {
        DpAnswer { value: f(self.value), ..self.clone() }
    }
}

pub fn laplace_mechanism<N: NoiseSource + ?Sized>(
    true_value: f64,
    sensitivity: Sensitivity,
    params: &PrivacyParams,
    noise: &mut N,
) -> Result<DpAnswer, DpError> {
    if params.delta != 0.0 {
        return Err(DpError::DeltaNotZero);
    }
    let scale = laplace_scale(sensitivity, params);
    let eta = laplace_sample(scale, noise.uniform_open01())?;
    Ok(DpAnswer {
        value: true_value + eta,
        mechanism: Mechanism::Laplace,
        params: *params,
        sensitivity,
        noise_scale: scale,
        query_id: None,
    })
}

pub fn gaussian_mechanism<N: NoiseSource + ?Sized>(
    true_value: f64,
    sensitivity: Sensitivity,
    params: &PrivacyParams,
    noise: &mut N,
) -> Result<DpAnswer, DpError> {
    let sigma = gaussian_sigma(sensitivity, params)?;
    Ok(DpAnswer {
        value: true_value + sigma * noise.standard_normal(),
        mechanism: Mechanism::Gaussian,
        params: *params,
        sensitivity,
        noise_scale: sigma,
        query_id: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub query_id: String,
    pub epsilon: f64,
    pub delta: f64,
    pub timestamp: i64,
}

impl LedgerEntry {
    /// `query_id,epsilon,delta,timestamp`
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.query_id, self.epsilon, self.delta, self.timestamp)
    }

    pub fn parse_line(line: &str) -> Result<Self, DpError> {
        let bad = || DpError::Ledger(format!("malformed ledger line {line:?}"));
        let mut parts = line.trim().split(',');
        let (Some(id), Some(eps), Some(delta), Some(ts), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        Ok(LedgerEntry {
            query_id: id.to_owned(),
            epsilon: eps.parse().map_err(|_| bad())?,
            delta: delta.parse().map_err(|_| bad())?,
            timestamp: ts.parse().map_err(|_| bad())?,
        })
    }
}

/// Append-only record of privacy loss with an ε cap.
///
/// Appends happen under a lock, so the cap check and the append are one
/// atomic step even when several queries share the ledger.
#[derive(Debug)]
pub struct BudgetLedger {
    epsilon_cap: f64,
    entries: Mutex<Vec<LedgerEntry>>,
}

impl BudgetLedger {
    pub fn new(epsilon_cap: f64) -> Result<Self, DpError> {
        if !(epsilon_cap.is_finite() && epsilon_cap > 0.0) {
            return Err(DpError::InvalidEpsilon(epsilon_cap));
        }
        Ok(BudgetLedger { epsilon_cap, entries: Mutex::new(Vec::new()) })
    }

    /// Restores a ledger from previously persisted entries.
    pub fn from_entries(epsilon_cap: f64, entries: Vec<LedgerEntry>) -> Result<Self, DpError> {
        let ledger = BudgetLedger::new(epsilon_cap)?;
        let total: f64 = entries.iter().map(|e| e.epsilon).sum();
        if entries.iter().any(|e| !(e.epsilon.is_finite() && e.epsilon > 0.0) || !(0.0..1.0).contains(&e.delta)) {
            return Err(DpError::Ledger("persisted entry has invalid parameters".into()));
        }
        if total > epsilon_cap + CAP_TOLERANCE {
            return Err(DpError::Ledger(format!("persisted spend {total} exceeds cap {epsilon_cap}")));
        }
        *ledger.entries.lock().expect("ledger lock") = entries;
        Ok(ledger)
    }

    /// Reads newline-delimited `query_id,epsilon,delta,timestamp` records.
    pub fn read_from<R: Read>(input: R, epsilon_cap: f64) -> Result<Self, DpError> {
        let mut entries = Vec::new();
        for line in BufReader::new(input).lines() {
            let line = line.map_err(|e| DpError::Ledger(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(LedgerEntry::parse_line(&line)?);
        }
        BudgetLedger::from_entries(epsilon_cap, entries)
    }

    pub fn epsilon_cap(&self) -> f64 {
        self.epsilon_cap
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spent(&self) -> f64 {
        compose(self).epsilon_total
    }

    pub fn remaining(&self) -> f64 {
        (self.epsilon_cap - self.spent()).max(0.0)
    }

    /// Whether a charge of `epsilon` would currently fit under the cap.
    pub fn has_headroom(&self, epsilon: f64) -> bool {
        self.spent() + epsilon <= self.epsilon_cap + CAP_TOLERANCE
    }

    /// Checks the cap and appends in one critical section. Leaves the ledger
    /// untouched on failure.
    pub(crate) fn charge(&self, query_id: Option<&str>, params: &PrivacyParams) -> Result<LedgerEntry, DpError> {
        let mut entries = self.entries.lock().expect("ledger lock");
        let spent: f64 = entries.iter().map(|e| e.epsilon).sum();
        if spent + params.epsilon > self.epsilon_cap + CAP_TOLERANCE {
            return Err(DpError::BudgetExhausted {
                spent,
                requested: params.epsilon,
                cap: self.epsilon_cap,
            });
        }
        let entry = LedgerEntry {
            query_id: query_id.map_or_else(|| format!("q{:06}", entries.len() + 1), str::to_owned),
            epsilon: params.epsilon,
            delta: params.delta,
            timestamp: chrono::Utc::now().timestamp(),
        };
        entries.push(entry.clone());
        Ok(entry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub epsilon_total: f64,
    pub delta_total: f64,
}

/// Basic composition: ε and δ add across entries.
pub fn compose(ledger: &BudgetLedger) -> Composition {
    let entries = ledger.entries.lock().expect("ledger lock");
    Composition {
        epsilon_total: entries.iter().map(|e| e.epsilon).sum(),
        delta_total: entries.iter().map(|e| e.delta).sum(),
    }
}

/// Half-open `[edges[i], edges[i+1])` bins over reading energies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramSpec {
    edges: Vec<EnergyQuantity>,
}

impl HistogramSpec {
    pub fn new(edges: Vec<EnergyQuantity>) -> Result<Self, DpError> {
        if edges.len() < 2 {
            return Err(DpError::InvalidHistogram("need at least two edges".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DpError::InvalidHistogram("edges must be strictly increasing".into()));
        }
        Ok(HistogramSpec { edges })
    }

    /// `bins` equal-width bins over `[0, upper)`.
    pub fn uniform(upper: EnergyQuantity, bins: usize) -> Result<Self, DpError> {
        if bins == 0 || upper.milli_kwh() < bins as i64 {
            return Err(DpError::InvalidHistogram("cannot split range into that many bins".into()));
        }
        let edges = (0..=bins)
            .map(|i| EnergyQuantity::from_milli_kwh(upper.milli_kwh() * i as i64 / bins as i64))
            .collect();
        HistogramSpec::new(edges)
    }

    pub fn edges(&self) -> &[EnergyQuantity] {
        &self.edges
    }

    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    /// Index of the bin holding `e`, or `None` outside the declared range.
    pub fn bin_of(&self, e: EnergyQuantity) -> Option<usize> {
        if e < self.edges[0] || e >= *self.edges.last().expect("non-empty") {
            return None;
        }
        Some(self.edges.partition_point(|&edge| edge <= e) - 1)
    }
}

fn energies_at(dataset: &FeederDataset, timestamp: i64) -> Vec<EnergyQuantity> {
    dataset.readings_at(timestamp).map(|r| r.energy()).collect()
}

fn require_pure(params: &PrivacyParams) -> Result<(), DpError> {
    if params.delta != 0.0 {
        return Err(DpError::DeltaNotZero);
    }
    Ok(())
}

fn with_id(mut answer: DpAnswer, id: &str) -> DpAnswer {
    answer.query_id = Some(id.to_owned());
    answer
}

/// Noisy feeder total (kWh) at one interval, Δ = dataset cap.
///
/// Budget is charged before any noise is drawn; on `BudgetExhausted` nothing
/// is sampled or released.
pub fn dp_sum<N: NoiseSource + ?Sized>(
    dataset: &FeederDataset,
    timestamp: i64,
    params: &PrivacyParams,
    ledger: &BudgetLedger,
    query_id: Option<&str>,
    noise: &mut N,
) -> Result<DpAnswer, DpError> {
    require_pure(params)?;
    let sensitivity = Sensitivity::from_energy(dataset.delta_max())?;
    let total: EnergyQuantity = energies_at(dataset, timestamp).into_iter().sum();
    let entry = ledger.charge(query_id, params)?;
    laplace_mechanism(total.kwh(), sensitivity, params, noise).map(|a| with_id(a, &entry.query_id))
}

/// Noisy count of households reporting at one interval, Δ = 1.
pub fn dp_count<N: NoiseSource + ?Sized>(
    dataset: &FeederDataset,
    timestamp: i64,
    params: &PrivacyParams,
    ledger: &BudgetLedger,
    query_id: Option<&str>,
    noise: &mut N,
) -> Result<DpAnswer, DpError> {
    require_pure(params)?;
    let count = dataset.readings_at(timestamp).count();
    let entry = ledger.charge(query_id, params)?;
    laplace_mechanism(count as f64, Sensitivity::count(), params, noise)
        .map(|a| with_id(a, &entry.query_id))
}

/// Noisy mean (kWh) at one interval: Laplace-noised sum over the exact count.
///
/// The count is treated as public; only the sum is protected.
pub fn dp_mean<N: NoiseSource + ?Sized>(
    dataset: &FeederDataset,
    timestamp: i64,
    params: &PrivacyParams,
    ledger: &BudgetLedger,
    query_id: Option<&str>,
    noise: &mut N,
) -> Result<DpAnswer, DpError> {
    require_pure(params)?;
    let values = energies_at(dataset, timestamp);
    if values.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    let count = values.len() as f64;
    let total: EnergyQuantity = values.into_iter().sum();
    let sensitivity = Sensitivity::from_energy(dataset.delta_max())?;
    let entry = ledger.charge(query_id, params)?;
    let noisy_sum = laplace_mechanism(total.kwh(), sensitivity, params, noise)?;
    Ok(with_id(noisy_sum.map_value(|s| s / count), &entry.query_id))
}

/// Noisy per-bin counts at one interval. Each household lands in at most one
/// bin, so the whole release costs a single ε.
pub fn dp_histogram<N: NoiseSource + ?Sized>(
    dataset: &FeederDataset,
    timestamp: i64,
    spec: &HistogramSpec,
    params: &PrivacyParams,
    ledger: &BudgetLedger,
    query_id: Option<&str>,
    noise: &mut N,
) -> Result<Vec<DpAnswer>, DpError> {
    require_pure(params)?;
    let mut counts = vec![0u64; spec.bin_count()];
    for e in energies_at(dataset, timestamp) {
        if let Some(bin) = spec.bin_of(e) {
            counts[bin] += 1;
        }
    }
    let entry = ledger.charge(query_id, params)?;
    counts
        .into_iter()
        .map(|c| {
            laplace_mechanism(c as f64, Sensitivity::count(), params, noise)
                .map(|a| with_id(a, &entry.query_id))
        })
        .collect()
}
