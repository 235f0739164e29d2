//! Purpose-based privacy gateway with a hash-chained audit log.
//!
//! Every request carries a purpose (primary utility operations or secondary
//! use), a consent flag and one operation. [`Gateway::route`] applies the
//! decision matrix, dispatches allowed work to the technique modules and
//! appends exactly one [`AuditRecord`] before anything is returned. If the
//! audit append fails the request fails and its result is dropped.
//!
//! Decision matrix:
//!
//! | operation        | Primary                          | Secondary, no consent | Secondary, consent |
//! |------------------|----------------------------------|-----------------------|--------------------|
//! | raw export       | allowed iff `allow_raw_primary`  | ConsentRequired       | allowed            |
//! | encrypted bill   | allowed                          | ConsentRequired       | allowed            |
//! | DP query         | allowed while budget remains     | same                  | same               |
//! | synthetic data   | allowed unless memorization      | same                  | same               |
//! | aggregate report | allowed iff no group suppressed  | same                  | same               |
//! | federated train  | allowed                          | same                  | same               |
//! | secure sum       | allowed iff enough participants  | same                  | same               |
//!
//! Malformed operations (unknown meter, bad parameters) are denied with
//! `InvalidRequest`; an optional per-requester request cap denies with
//! `RateLimited`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anonymize::{aggregate_threshold, check_k_anonymity, AggregationPolicy, GroupOutcome, QuasiIdentifierRecord};
use crate::dp::{
    compose, dp_count, dp_histogram, dp_mean, dp_sum, laplace_mechanism, BudgetLedger, DpAnswer, DpError,
    HistogramSpec, PrivacyParams, Sensitivity,
};
use crate::fedlearn::{run_federation, shard_round_robin, Aggregation, RoundConfig, RoundMetrics};
use crate::he::{keygen, PaillierKeypair, RateSchedule};
use crate::meterdata::{
    parse_csv, parse_timestamp, to_csv_string, EnergyQuantity, FeederDataset, IngestConfig, MeterDataError, MeterId,
};
use crate::smpc::{secure_sum, PartyId, PartyInput, SecureSumOutcome};
use crate::synthetic::{fidelity_report, fit, generate, privacy_check, FidelityReport, PrivacyCheckReport};

pub const HASH_LEN: usize = 32;
pub const GENESIS_HASH: [u8; HASH_LEN] = [0; HASH_LEN];
pub const DEFAULT_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("audit append failed, request aborted: {0}")]
    AuditWriteFailure(String),
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("data store: {0}")]
    Data(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    StorageFailure(String),
    #[error("audit log is corrupt at record {0}")]
    Corrupt(u64),
    #[error("malformed audit record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DenialReason {
    ConsentRequired,
    BudgetExhausted,
    BelowAggregationThreshold,
    MemorizationDetected,
    PolicyViolation,
    InvalidRequest,
    RateLimited,
}

impl DenialReason {
    pub const ALL: [DenialReason; 7] = [
        DenialReason::ConsentRequired,
        DenialReason::BudgetExhausted,
        DenialReason::BelowAggregationThreshold,
        DenialReason::MemorizationDetected,
        DenialReason::PolicyViolation,
        DenialReason::InvalidRequest,
        DenialReason::RateLimited,
    ];

    pub fn code(self) -> &'static str {
        match self {
            DenialReason::ConsentRequired => "ConsentRequired",
            DenialReason::BudgetExhausted => "BudgetExhausted",
            DenialReason::BelowAggregationThreshold => "BelowAggregationThreshold",
            DenialReason::MemorizationDetected => "MemorizationDetected",
            DenialReason::PolicyViolation => "PolicyViolation",
            DenialReason::InvalidRequest => "InvalidRequest",
            DenialReason::RateLimited => "RateLimited",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        DenialReason::ALL.into_iter().find(|r| r.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Allowed,
    Denied(DenialReason),
}

impl Outcome {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Outcome::Allowed)
    }
}

fn de_timestamp<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Epoch(i64),
        Iso(String),
    }
    match Raw::deserialize(d)? {
        Raw::Epoch(t) => Ok(t),
        Raw::Iso(s) => parse_timestamp(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpQueryKind {
    Sum,
    Count,
    Mean,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpQuerySpec {
    pub query: DpQueryKind,
    #[serde(deserialize_with = "de_timestamp")]
    pub timestamp: i64,
    pub epsilon: f64,
    #[serde(default)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clusters: usize,
    pub households: usize,
    pub days: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSpec {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub dp_sigma: Option<f64>,
    #[serde(default)]
    pub secure_agg: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpcSpec {
    #[serde(deserialize_with = "de_timestamp")]
    pub timestamp: i64,
    #[serde(default)]
    pub min_participants: Option<usize>,
    /// Adds Laplace noise to the released sum and charges the budget.
    #[serde(default)]
    pub dp_epsilon: Option<f64>,
}

/// Time-of-use bill for one meter over one day. `rates[i]` applies to the
/// i-th interval of the day, per milli-kWh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillSpec {
    pub meter_id: String,
    #[serde(deserialize_with = "de_timestamp")]
    pub day_start: i64,
    pub rates: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Feeder totals per interval; group size is households reporting.
    Interval,
    /// Per-meter totals grouped by quasi-identifier tuple.
    QuasiIdentifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub group_by: GroupBy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Operation {
    RawExport {
        #[serde(default)]
        meter_id: Option<String>,
    },
    DpQuery(DpQuerySpec),
    SynthGenerate(SynthSpec),
    FedTrain(FedSpec),
    SmpcSum(SmpcSpec),
    HeBill(BillSpec),
    AggregateReport(AggregateSpec),
}

impl Operation {
    pub fn kind(&self) -> OperationKind {
        match self {
            Operation::RawExport { .. } => OperationKind::RawExport,
            Operation::DpQuery(_) => OperationKind::DpQuery,
            Operation::SynthGenerate(_) => OperationKind::SynthGenerate,
            Operation::FedTrain(_) => OperationKind::FedTrain,
            Operation::SmpcSum(_) => OperationKind::SmpcSum,
            Operation::HeBill(_) => OperationKind::HeBill,
            Operation::AggregateReport(_) => OperationKind::AggregateReport,
        }
    }

    /// Mechanism name written to the audit log.
    pub fn mechanism(&self) -> &'static str {
        match self {
            Operation::RawExport { .. } => "raw",
            Operation::DpQuery(_) => "laplace",
            Operation::SynthGenerate(_) => "synthetic",
            Operation::FedTrain(f) if f.secure_agg => "fedavg+masking",
            Operation::FedTrain(_) => "fedavg",
            Operation::SmpcSum(s) if s.dp_epsilon.is_some() => "secret_sharing+laplace",
            Operation::SmpcSum(_) => "secret_sharing",
            Operation::HeBill(_) => "paillier",
            Operation::AggregateReport(_) => "threshold_aggregate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    RawExport,
    DpQuery,
    SynthGenerate,
    FedTrain,
    SmpcSum,
    HeBill,
    AggregateReport,
}

impl OperationKind {
    pub const ALL: [OperationKind; 7] = [
        OperationKind::RawExport,
        OperationKind::DpQuery,
        OperationKind::SynthGenerate,
        OperationKind::FedTrain,
        OperationKind::SmpcSum,
        OperationKind::HeBill,
        OperationKind::AggregateReport,
    ];

    /// Operations whose result exposes individual meters.
    pub fn releases_individual_data(self) -> bool {
        matches!(self, OperationKind::RawExport | OperationKind::HeBill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub request_id: String,
    pub requester: String,
    pub purpose: Purpose,
    pub consent: bool,
    pub operation: Operation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub epsilon_cap: f64,
    pub min_aggregation_count: usize,
    pub k: usize,
    #[serde(default)]
    pub allow_raw_primary: bool,
    #[serde(default = "default_memorization_threshold")]
    pub memorization_threshold: f64,
    #[serde(default = "default_interval")]
    pub interval_s: u32,
    #[serde(default = "default_delta_max")]
    pub delta_max_kwh: f64,
    #[serde(default = "default_he_bits")]
    pub he_key_bits: u64,
    /// Maximum requests per requester; unlimited when absent.
    #[serde(default)]
    pub rate_limit: Option<u32>,
}

fn default_memorization_threshold() -> f64 {
    crate::synthetic::DEFAULT_MEMORIZATION_THRESHOLD
}

fn default_interval() -> u32 {
    3600
}

fn default_delta_max() -> f64 {
    5.0
}

fn default_he_bits() -> u64 {
    1024
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            epsilon_cap: crate::dp::DEFAULT_EPSILON_CAP,
            min_aggregation_count: 5,
            k: 5,
            allow_raw_primary: false,
            memorization_threshold: default_memorization_threshold(),
            interval_s: default_interval(),
            delta_max_kwh: default_delta_max(),
            he_key_bits: default_he_bits(),
            rate_limit: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidPolicy(m.into()));
        if !(self.epsilon_cap.is_finite() && self.epsilon_cap > 0.0) {
            return bad("epsilon_cap must be positive");
        }
        if self.min_aggregation_count == 0 {
            return bad("min_aggregation_count must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.memorization_threshold.is_finite() && self.memorization_threshold >= 0.0) {
            return bad("memorization_threshold must be non-negative");
        }
        if !(self.delta_max_kwh.is_finite() && self.delta_max_kwh > 0.0) {
            return bad("delta_max_kwh must be positive");
        }
        if self.he_key_bits < crate::he::MIN_KEY_BITS {
            return bad("he_key_bits is too small");
        }
        self.ingest_config().map(|_| ())
    }

    pub fn ingest_config(&self) -> Result<IngestConfig, GatewayError> {
        IngestConfig::new(self.interval_s, EnergyQuantity::from_kwh_f64(self.delta_max_kwh))
            .map_err(|e| GatewayError::InvalidPolicy(e.to_string()))
    }
}

/// The purpose/consent part of the decision matrix. `None` means the request
/// may proceed to dispatch.
pub fn purpose_rule(kind: OperationKind, purpose: Purpose, consent: bool, policy: &PolicyConfig) -> Option<DenialReason> {
    match (kind, purpose) {
        (OperationKind::RawExport, Purpose::Primary) if !policy.allow_raw_primary => Some(DenialReason::PolicyViolation),
        (OperationKind::RawExport | OperationKind::HeBill, Purpose::Secondary) if !consent => {
            Some(DenialReason::ConsentRequired)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperationResult {
    Readings { csv: String },
    Dp { answers: Vec<DpAnswer> },
    Synthetic { csv: String, fidelity: FidelityReport, privacy: PrivacyCheckReport },
    Model { weights: Vec<f64>, history: Vec<RoundMetrics> },
    SecureSum { total_kwh: f64, participants: usize, noised: bool },
    Bill { amount: String, ciphertext: String, key_id: String },
    Aggregates { groups: Vec<(String, GroupOutcome)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub request_id: String,
    pub outcome: Outcome,
    pub mechanism: String,
    pub epsilon_spent: f64,
    pub audit_seq: u64,
    pub result: Option<OperationResult>,
}

mod hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub request_id: String,
    pub requester: String,
    pub outcome: Outcome,
    pub mechanism: String,
    pub epsilon_spent: f64,
    pub timestamp: i64,
    #[serde(with = "hex32")]
    pub prev_hash: [u8; HASH_LEN],
    #[serde(with = "hex32")]
    pub hash: [u8; HASH_LEN],
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_be_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AuditError> {
        if self.bytes.len() < n {
            return Err(AuditError::Malformed("truncated record".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], AuditError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self) -> Result<String, AuditError> {
        let len = u32::from_be_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| AuditError::Malformed("invalid utf-8".into()))
    }
}

impl AuditRecord {
    /// Length-prefixed big-endian encoding of every field except the hashes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.seq.to_be_bytes());
        put_str(&mut buf, &self.request_id);
        put_str(&mut buf, &self.requester);
        match self.outcome {
            Outcome::Allowed => buf.push(0),
            Outcome::Denied(r) => {
                buf.push(1);
                put_str(&mut buf, r.code());
            }
        }
        put_str(&mut buf, &self.mechanism);
        buf.extend_from_slice(&self.epsilon_spent.to_bits().to_be_bytes());
        buf.extend_from_slice(&self.timestamp.to_be_bytes());
        buf
    }

    /// SHA-256(prev_hash ‖ canonical bytes).
    pub fn compute_hash(&self) -> [u8; HASH_LEN] {
        let mut h = Sha256::new();
        h.update(self.prev_hash);
        h.update(self.canonical_bytes());
        h.finalize().into()
    }

    /// Storage form: canonical bytes ‖ prev_hash ‖ hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = self.canonical_bytes();
        buf.extend_from_slice(&self.prev_hash);
        buf.extend_from_slice(&self.hash);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AuditError> {
        let mut c = Cursor { bytes };
        let seq = u64::from_be_bytes(c.array()?);
        let request_id = c.string()?;
        let requester = c.string()?;
        let outcome = match c.array::<1>()?[0] {
            0 => Outcome::Allowed,
            1 => {
                let code = c.string()?;
                Outcome::Denied(
                    DenialReason::from_code(&code).ok_or_else(|| AuditError::Malformed(format!("unknown reason {code}")))?,
                )
            }
            t => return Err(AuditError::Malformed(format!("unknown outcome tag {t}"))),
        };
        let mechanism = c.string()?;
        let epsilon_spent = f64::from_bits(u64::from_be_bytes(c.array()?));
        let timestamp = i64::from_be_bytes(c.array()?);
        let prev_hash = c.array()?;
        let hash = c.array()?;
        if !c.bytes.is_empty() {
            return Err(AuditError::Malformed("trailing bytes".into()));
        }
        Ok(AuditRecord { seq, request_id, requester, outcome, mechanism, epsilon_spent, timestamp, prev_hash, hash })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerification {
    pub valid: bool,
    pub first_bad_seq: Option<u64>,
}

/// Recomputes every digest and link; reports the first position that fails.
pub fn verify_chain(records: &[AuditRecord]) -> ChainVerification {
    let mut prev = GENESIS_HASH;
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 || r.prev_hash != prev || r.compute_hash() != r.hash {
            return ChainVerification { valid: false, first_bad_seq: Some(i as u64) };
        }
        prev = r.hash;
    }
    ChainVerification { valid: true, first_bad_seq: None }
}

/// Decodes stored records and verifies the chain; undecodable records count
/// as the first bad position.
pub fn verify_encoded(encoded: &[Vec<u8>]) -> ChainVerification {
    let mut records = Vec::with_capacity(encoded.len());
    for (i, bytes) in encoded.iter().enumerate() {
        match AuditRecord::from_bytes(bytes) {
            Ok(r) => records.push(r),
            Err(_) => {
                let prefix = verify_chain(&records);
                return ChainVerification { valid: false, first_bad_seq: prefix.first_bad_seq.or(Some(i as u64)) };
            }
        }
    }
    verify_chain(&records)
}

/// Durable storage behind an [`AuditLog`]. `append` must persist the record
/// before returning `Ok`.
pub trait AuditSink: Send {
    fn append(&mut self, record: &AuditRecord) -> Result<(), AuditError>;
}

/// Keeps records only in the log's memory.
#[derive(Debug, Default)]
pub struct MemorySink;

impl AuditSink for MemorySink {
    fn append(&mut self, _record: &AuditRecord) -> Result<(), AuditError> {
        Ok(())
    }
}

/// One JSON object per line, synced to disk after each append.
#[derive(Debug)]
pub struct JsonlSink {
    file: File,
}

impl JsonlSink {
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AuditError::StorageFailure(e.to_string()))?;
        Ok(JsonlSink { file })
    }
}

impl AuditSink for JsonlSink {
    fn append(&mut self, record: &AuditRecord) -> Result<(), AuditError> {
        let mut line = serde_json::to_string(record).map_err(|e| AuditError::StorageFailure(e.to_string()))?;
        line.push('\n');
        let io = |e: std::io::Error| AuditError::StorageFailure(e.to_string());
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Wraps a sink and fails every append while armed.
pub struct FaultInjectingSink<S> {
    inner: S,
    armed: Arc<AtomicBool>,
}

impl<S: AuditSink> FaultInjectingSink<S> {
    /// Returns the sink and the switch that arms it.
    pub fn new(inner: S) -> (Self, Arc<AtomicBool>) {
        let armed = Arc::new(AtomicBool::new(false));
        (FaultInjectingSink { inner, armed: Arc::clone(&armed) }, armed)
    }
}

impl<S: AuditSink> AuditSink for FaultInjectingSink<S> {
    fn append(&mut self, record: &AuditRecord) -> Result<(), AuditError> {
        if self.armed.load(Ordering::SeqCst) {
            return Err(AuditError::StorageFailure("injected fault".into()));
        }
        self.inner.append(record)
    }
}

/// Reads a JSON-lines audit log.
pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<AuditRecord>, AuditError> {
    BufReader::new(input)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| AuditError::StorageFailure(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| AuditError::Malformed(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Append-only hash-chained log.
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Box<dyn AuditSink>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog { records: Vec::new(), sink: Box::new(MemorySink) }
    }

    pub fn with_sink(sink: Box<dyn AuditSink>) -> Self {
        AuditLog { records: Vec::new(), sink }
    }

    /// Resumes a JSON-lines log, refusing to extend a broken chain.
    pub fn open_jsonl(path: &Path) -> Result<Self, AuditError> {
        let records = match File::open(path) {
            Ok(f) => read_jsonl(f)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(AuditError::StorageFailure(e.to_string())),
        };
        if let Some(bad) = verify_chain(&records).first_bad_seq {
            return Err(AuditError::Corrupt(bad));
        }
        Ok(AuditLog { records, sink: Box::new(JsonlSink::open(path)?) })
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Chains a new record to the tail and persists it. On failure the log is
    /// unchanged.
    pub fn append(
        &mut self,
        request_id: &str,
        requester: &str,
        outcome: Outcome,
        mechanism: &str,
        epsilon_spent: f64,
        timestamp: i64,
    ) -> Result<AuditRecord, AuditError> {
        let mut record = AuditRecord {
            seq: self.records.len() as u64,
            request_id: request_id.to_owned(),
            requester: requester.to_owned(),
            outcome,
            mechanism: mechanism.to_owned(),
            epsilon_spent,
            timestamp,
            prev_hash: self.records.last().map_or(GENESIS_HASH, |r| r.hash),
            hash: [0; HASH_LEN],
        };
        record.hash = record.compute_hash();
        self.sink.append(&record)?;
        self.records.push(record.clone());
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendReport {
    pub epsilon_total: f64,
    pub per_requester: BTreeMap<String, f64>,
    /// Ledger spend whose query id matches no audit record.
    pub unattributed: f64,
    pub denied: BTreeMap<String, usize>,
}

/// Joins ledger entries (keyed by request id) with the audit log.
pub fn spend_report(ledger: &BudgetLedger, records: &[AuditRecord]) -> SpendReport {
    let requester_of: HashMap<&str, &str> =
        records.iter().map(|r| (r.request_id.as_str(), r.requester.as_str())).collect();
    let mut per_requester = BTreeMap::new();
    let mut unattributed = 0.0;
    for e in ledger.entries() {
        match requester_of.get(e.query_id.as_str()) {
            Some(who) => *per_requester.entry((*who).to_owned()).or_insert(0.0) += e.epsilon,
            None => unattributed += e.epsilon,
        }
    }
    let mut denied = BTreeMap::new();
    for r in records {
        if let Outcome::Denied(reason) = r.outcome {
            *denied.entry(reason.code().to_owned()).or_insert(0) += 1;
        }
    }
    SpendReport { epsilon_total: compose(ledger).epsilon_total, per_requester, unattributed, denied }
}

/// Readings plus optional per-meter quasi-identifiers.
#[derive(Debug, Clone)]
pub struct DataStore {
    pub dataset: FeederDataset,
    pub quasi_identifiers: BTreeMap<MeterId, QuasiIdentifierRecord>,
}

impl DataStore {
    pub fn new(dataset: FeederDataset) -> Self {
        DataStore { dataset, quasi_identifiers: BTreeMap::new() }
    }

    /// Loads `readings.csv` and, if present, `meters.csv`
    /// (`meter_id,<attribute>...` with a header row).
    pub fn load_dir(dir: &Path, config: &IngestConfig) -> Result<Self, GatewayError> {
        let data_err = |e: &dyn std::fmt::Display| GatewayError::Data(e.to_string());
        let readings = File::open(dir.join("readings.csv")).map_err(|e| data_err(&e))?;
        let dataset = parse_csv(readings, config).map_err(|e: MeterDataError| data_err(&e))?;
        let mut quasi_identifiers = BTreeMap::new();
        if let Ok(f) = File::open(dir.join("meters.csv")) {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
            for row in rdr.records() {
                let row = row.map_err(|e| data_err(&e))?;
                let mut fields = row.iter();
                let id = fields.next().ok_or_else(|| GatewayError::Data("empty meters.csv row".into()))?;
                quasi_identifiers.insert(MeterId::new(id), QuasiIdentifierRecord::new(fields));
            }
        }
        Ok(DataStore { dataset, quasi_identifiers })
    }
}

type Clock = Box<dyn FnMut() -> i64 + Send>;
type Dispatched = Result<(OperationResult, f64), DenialReason>;

pub struct Gateway {
    policy: PolicyConfig,
    data: DataStore,
    ledger: BudgetLedger,
    audit: AuditLog,
    rng: ChaCha20Rng,
    clock: Clock,
    he_key: Option<PaillierKeypair>,
    seen_ids: HashSet<String>,
    request_counts: HashMap<String, u32>,
}

impl Gateway {
    pub fn new(policy: PolicyConfig, data: DataStore, audit: AuditLog, seed: u64) -> Result<Self, GatewayError> {
        policy.validate()?;
        let ledger = BudgetLedger::new(policy.epsilon_cap).map_err(|e| GatewayError::InvalidPolicy(e.to_string()))?;
        let seen_ids = audit.records().iter().map(|r| r.request_id.clone()).collect();
        let mut request_counts = HashMap::new();
        for r in audit.records() {
            *request_counts.entry(r.requester.clone()).or_insert(0) += 1;
        }
        Ok(Gateway {
            policy,
            data,
            ledger,
            audit,
            rng: ChaCha20Rng::seed_from_u64(seed),
            clock: Box::new(|| chrono::Utc::now().timestamp()),
            he_key: None,
            seen_ids,
            request_counts,
        })
    }

    /// Replaces the budget ledger, e.g. with one restored from disk.
    pub fn with_ledger(mut self, ledger: BudgetLedger) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn with_clock(mut self, clock: impl FnMut() -> i64 + Send + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn spend_report(&self) -> SpendReport {
        spend_report(&self.ledger, self.audit.records())
    }

    /// Decides, dispatches and audits one request.
    ///
    /// Exactly one audit record is appended per valid envelope. Envelopes
    /// with an empty or reused request id are rejected without a record.
    pub fn route(&mut self, req: &RequestEnvelope) -> Result<Decision, GatewayError> {
        if req.request_id.is_empty() || req.requester.is_empty() {
            return Err(GatewayError::InvalidEnvelope("request_id and requester are required".into()));
        }
        if self.seen_ids.contains(&req.request_id) {
            return Err(GatewayError::InvalidEnvelope(format!("duplicate request_id {}", req.request_id)));
        }
        let count = self.request_counts.get(&req.requester).copied().unwrap_or(0);
        let dispatched = if self.policy.rate_limit.is_some_and(|limit| count >= limit) {
            Err(DenialReason::RateLimited)
        } else if let Some(reason) = purpose_rule(req.operation.kind(), req.purpose, req.consent, &self.policy) {
            Err(reason)
        } else {
            self.dispatch(req)
        };
        let (outcome, result, epsilon_spent) = match dispatched {
            Ok((result, eps)) => (Outcome::Allowed, Some(result), eps),
            Err(reason) => (Outcome::Denied(reason), None, 0.0),
        };
        let mechanism = req.operation.mechanism();
        let now = (self.clock)();
        let record = self
            .audit
            .append(&req.request_id, &req.requester, outcome, mechanism, epsilon_spent, now)
            .map_err(|e| GatewayError::AuditWriteFailure(e.to_string()))?;
        self.seen_ids.insert(req.request_id.clone());
        *self.request_counts.entry(req.requester.clone()).or_insert(0) += 1;
        Ok(Decision {
            request_id: req.request_id.clone(),
            outcome,
            mechanism: mechanism.to_owned(),
            epsilon_spent,
            audit_seq: record.seq,
            result,
        })
    }

    fn dispatch(&mut self, req: &RequestEnvelope) -> Dispatched {
        match &req.operation {
            Operation::RawExport { meter_id } => self.raw_export(meter_id.as_deref()),
            Operation::DpQuery(spec) => self.dp_query(&req.request_id, spec),
            Operation::SynthGenerate(spec) => self.synth_generate(spec),
            Operation::FedTrain(spec) => self.fed_train(spec),
            Operation::SmpcSum(spec) => self.smpc_sum(&req.request_id, spec),
            Operation::HeBill(spec) => self.he_bill(spec),
            Operation::AggregateReport(spec) => self.aggregate_report(spec),
        }
    }

    fn raw_export(&self, meter_id: Option<&str>) -> Dispatched {
        let dataset = match meter_id {
            None => self.data.dataset.clone(),
            Some(id) => {
                let series = self.data.dataset.find(&MeterId::new(id)).ok_or(DenialReason::InvalidRequest)?;
                FeederDataset::new(vec![series.clone()], self.data.dataset.interval_s(), self.data.dataset.delta_max())
                    .map_err(|_| DenialReason::InvalidRequest)?
            }
        };
        Ok((OperationResult::Readings { csv: to_csv_string(&dataset) }, 0.0))
    }

    fn dp_query(&mut self, request_id: &str, spec: &DpQuerySpec) -> Dispatched {
        let params = PrivacyParams::pure(spec.epsilon).map_err(|_| DenialReason::InvalidRequest)?;
        let d = &self.data.dataset;
        let id = Some(request_id);
        let answers = match spec.query {
            DpQueryKind::Sum => dp_sum(d, spec.timestamp, &params, &self.ledger, id, &mut self.rng).map(|a| vec![a]),
            DpQueryKind::Count => dp_count(d, spec.timestamp, &params, &self.ledger, id, &mut self.rng).map(|a| vec![a]),
            DpQueryKind::Mean => dp_mean(d, spec.timestamp, &params, &self.ledger, id, &mut self.rng).map(|a| vec![a]),
            DpQueryKind::Histogram => {
                let hist = HistogramSpec::uniform(d.delta_max(), spec.bins.unwrap_or(DEFAULT_HISTOGRAM_BINS))
                    .map_err(|_| DenialReason::InvalidRequest)?;
                dp_histogram(d, spec.timestamp, &hist, &params, &self.ledger, id, &mut self.rng)
            }
        };
        match answers {
            Ok(answers) => Ok((OperationResult::Dp { answers }, params.epsilon())),
            Err(DpError::BudgetExhausted { .. }) => Err(DenialReason::BudgetExhausted),
            Err(_) => Err(DenialReason::InvalidRequest),
        }
    }

    fn synth_generate(&self, spec: &SynthSpec) -> Dispatched {
        let real = &self.data.dataset;
        let model = fit(real, spec.clusters, spec.seed).map_err(|_| DenialReason::InvalidRequest)?;
        let synth = generate(&model, spec.households, spec.days, spec.seed.wrapping_add(1))
            .map_err(|_| DenialReason::InvalidRequest)?;
        let privacy =
            privacy_check(real, &synth, self.policy.memorization_threshold).map_err(|_| DenialReason::InvalidRequest)?;
        if privacy.memorization_flag {
            return Err(DenialReason::MemorizationDetected);
        }
        let fidelity = fidelity_report(real, &synth).map_err(|_| DenialReason::InvalidRequest)?;
        Ok((OperationResult::Synthetic { csv: to_csv_string(&synth), fidelity, privacy }, 0.0))
    }

    fn fed_train(&self, spec: &FedSpec) -> Dispatched {
        let invalid = |_| DenialReason::InvalidRequest;
        let mut cfg = RoundConfig::new(spec.rounds, spec.local_steps, spec.learning_rate).map_err(invalid)?;
        if let Some(c) = spec.clip_norm {
            cfg = cfg.with_clip_norm(c).map_err(invalid)?;
        }
        if let Some(s) = spec.dp_sigma {
            cfg = cfg.with_dp_sigma(s).map_err(invalid)?;
        }
        if spec.secure_agg {
            cfg = cfg.with_aggregation(Aggregation::Masked);
        }
        let shards = shard_round_robin(&self.data.dataset, spec.clients).map_err(invalid)?;
        let fed = run_federation(&shards, &cfg, spec.seed).map_err(invalid)?;
        Ok((OperationResult::Model { weights: fed.final_model.weights().to_vec(), history: fed.history }, 0.0))
    }

    fn smpc_sum(&mut self, request_id: &str, spec: &SmpcSpec) -> Dispatched {
        let inputs: Vec<PartyInput> = self
            .data
            .dataset
            .readings_at(spec.timestamp)
            .enumerate()
            .map(|(i, r)| PartyInput::new(PartyId(i as u32), r.energy()))
            .collect();
        let min = spec.min_participants.unwrap_or(0).max(self.policy.min_aggregation_count);
        let run = secure_sum(&inputs, min, &mut self.rng).map_err(|_| DenialReason::InvalidRequest)?;
        let total = match run.outcome {
            SecureSumOutcome::Completed(total) => total,
            SecureSumOutcome::Aborted(_) => return Err(DenialReason::BelowAggregationThreshold),
        };
        let Some(eps) = spec.dp_epsilon else {
            return Ok((
                OperationResult::SecureSum { total_kwh: total.kwh(), participants: inputs.len(), noised: false },
                0.0,
            ));
        };
        let params = PrivacyParams::pure(eps).map_err(|_| DenialReason::InvalidRequest)?;
        let sens = Sensitivity::from_energy(self.data.dataset.delta_max()).map_err(|_| DenialReason::InvalidRequest)?;
        self.ledger.charge(Some(request_id), &params).map_err(|_| DenialReason::BudgetExhausted)?;
        let noisy = laplace_mechanism(total.kwh(), sens, &params, &mut self.rng).map_err(|_| DenialReason::InvalidRequest)?;
        Ok((OperationResult::SecureSum { total_kwh: noisy.value, participants: inputs.len(), noised: true }, eps))
    }

    fn he_bill(&mut self, spec: &BillSpec) -> Dispatched {
        let series = self.data.dataset.find(&MeterId::new(&spec.meter_id)).ok_or(DenialReason::InvalidRequest)?;
        let interval = i64::from(self.data.dataset.interval_s());
        let usage: Vec<u64> = (0..spec.rates.len() as i64)
            .map(|i| {
                let ts = spec.day_start + i * interval;
                let idx = series.readings().binary_search_by_key(&ts, |r| r.timestamp()).ok()?;
                u64::try_from(series.readings()[idx].energy().milli_kwh()).ok()
            })
            .collect::<Option<_>>()
            .ok_or(DenialReason::InvalidRequest)?;
        if usage.is_empty() || spec.rates.len() as i64 * interval > crate::synthetic::SECONDS_PER_DAY {
            return Err(DenialReason::InvalidRequest);
        }
        if self.he_key.is_none() {
            self.he_key = Some(keygen(self.policy.he_key_bits, &mut self.rng).map_err(|_| DenialReason::InvalidRequest)?);
        }
        let kp = self.he_key.as_ref().expect("key initialised above");
        let pk = kp.public();
        // Meter side: encrypt each interval's usage.
        let cts = usage
            .iter()
            .map(|&u| pk.encrypt_u64(u, &mut self.rng as &mut dyn RngCore))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DenialReason::InvalidRequest)?;
        // Utility side: bill computed on ciphertexts only.
        let max_usage = self.data.dataset.delta_max().milli_kwh() as u64;
        let bill = pk
            .encrypted_bill(&cts, &RateSchedule::new(spec.rates.clone(), max_usage))
            .map_err(|_| DenialReason::InvalidRequest)?;
        let amount = kp.decrypt(&bill).map_err(|_| DenialReason::InvalidRequest)?;
        Ok((
            OperationResult::Bill { amount: amount.to_str_radix(10), ciphertext: bill.to_hex(), key_id: pk.key_id().to_owned() },
            0.0,
        ))
    }

    fn aggregate_report(&self, spec: &AggregateSpec) -> Dispatched {
        let policy =
            AggregationPolicy::new(self.policy.min_aggregation_count).map_err(|_| DenialReason::InvalidRequest)?;
        let groups: Vec<(String, GroupOutcome)> = match spec.group_by {
            GroupBy::Interval => {
                let mut by_ts: BTreeMap<i64, Vec<EnergyQuantity>> = BTreeMap::new();
                for r in self.data.dataset.readings() {
                    by_ts.entry(r.timestamp()).or_default().push(r.energy());
                }
                aggregate_threshold(&by_ts, &policy)
                    .into_iter()
                    .map(|(ts, g)| (crate::meterdata::format_timestamp(ts), g))
                    .collect()
            }
            GroupBy::QuasiIdentifier => {
                let qi = &self.data.quasi_identifiers;
                if qi.is_empty() {
                    return Err(DenialReason::InvalidRequest);
                }
                let mut by_class: BTreeMap<Vec<String>, Vec<EnergyQuantity>> = BTreeMap::new();
                let mut records = Vec::new();
                for s in self.data.dataset.series() {
                    let q = qi.get(s.meter_id()).ok_or(DenialReason::InvalidRequest)?;
                    records.push(q.clone());
                    by_class.entry(q.attributes.clone()).or_default().push(s.energies().sum());
                }
                let k = check_k_anonymity(&records, self.policy.k).map_err(|_| DenialReason::InvalidRequest)?;
                if !k.pass {
                    return Err(DenialReason::BelowAggregationThreshold);
                }
                aggregate_threshold(&by_class, &policy).into_iter().map(|(k, g)| (k.join("|"), g)).collect()
            }
        };
        if groups.iter().any(|(_, g)| g.is_suppressed()) {
            return Err(DenialReason::BelowAggregationThreshold);
        }
        Ok((OperationResult::Aggregates { groups }, 0.0))
    }
}

#[derive(Debug, Serialize)]
struct ErrorLine<'a> {
    request_id: Option<&'a str>,
    error: String,
}

/// Line protocol: one JSON [`RequestEnvelope`] per input line, one JSON
/// [`Decision`] (or `{"error": ...}`) per output line. Stops on the first
/// audit failure. Returns the number of requests handled.
pub fn serve<R: BufRead, W: Write>(gateway: &mut Gateway, input: R, mut output: W) -> Result<usize, GatewayError> {
    let io = |e: std::io::Error| GatewayError::Data(e.to_string());
    let mut handled = 0;
    for line in input.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<RequestEnvelope>(&line) {
            Err(e) => serde_json::to_string(&ErrorLine { request_id: None, error: format!("malformed request: {e}") }),
            Ok(req) => match gateway.route(&req) {
                Ok(decision) => serde_json::to_string(&decision),
                Err(e @ GatewayError::AuditWriteFailure(_)) => {
                    let msg = serde_json::to_string(&ErrorLine { request_id: Some(&req.request_id), error: e.to_string() })
                        .expect("error line serializes");
                    writeln!(output, "{msg}").map_err(io)?;
                    output.flush().map_err(io)?;
                    return Err(e);
                }
                Err(e) => serde_json::to_string(&ErrorLine { request_id: Some(&req.request_id), error: e.to_string() }),
            },
        }
        .expect("reply serializes");
        writeln!(output, "{reply}").map_err(io)?;
        output.flush().map_err(io)?;
        handled += 1;
    }
    Ok(handled)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::meterdata::ReadingSeries;

    const HOUR: u32 = 3600;

    fn dataset(meters: usize, hours: usize) -> FeederDataset {
        let series = (0..meters)
            .map(|m| {
                ReadingSeries::from_energies(
                    MeterId::new(format!("m{m:03}")),
                    0,
                    HOUR,
                    (0..hours).map(|h| EnergyQuantity::from_milli_kwh(500 + ((m * 37 + h * 11) % 900) as i64)),
                )
                .unwrap()
            })
            .collect();
        FeederDataset::new(series, HOUR, EnergyQuantity::from_milli_kwh(5000)).unwrap()
    }

    fn policy() -> PolicyConfig {
        PolicyConfig { min_aggregation_count: 3, k: 2, he_key_bits: 128, ..PolicyConfig::default() }
    }

    fn gateway(policy: PolicyConfig) -> Gateway {
        Gateway::new(policy, DataStore::new(dataset(6, 48)), AuditLog::in_memory(), 1).unwrap().with_clock(|| 1_700_000_000)
    }

    fn req(id: &str, who: &str, purpose: Purpose, consent: bool, operation: Operation) -> RequestEnvelope {
        RequestEnvelope { request_id: id.into(), requester: who.into(), purpose, consent, operation }
    }

    fn dp_sum_op(eps: f64) -> Operation {
        Operation::DpQuery(DpQuerySpec { query: DpQueryKind::Sum, timestamp: 0, epsilon: eps, bins: None })
    }

    #[test]
    fn raw_export_rules() {
        let mut g = gateway(policy());
        let raw = Operation::RawExport { meter_id: None };
        let d = g.route(&req("r1", "x", Purpose::Secondary, false, raw.clone())).unwrap();
        assert_eq!(d.outcome, Outcome::Denied(DenialReason::ConsentRequired));
        assert!(d.result.is_none());
        let d = g.route(&req("r2", "x", Purpose::Primary, false, raw.clone())).unwrap();
        assert_eq!(d.outcome, Outcome::Denied(DenialReason::PolicyViolation));

        let mut g = gateway(PolicyConfig { allow_raw_primary: true, ..policy() });
        let d = g.route(&req("r3", "x", Purpose::Primary, false, raw)).unwrap();
        assert_eq!(d.outcome, Outcome::Allowed);
        assert!(matches!(d.result, Some(OperationResult::Readings { .. })));
    }

    #[test]
    fn budget_exhaustion_is_audited() {
        let mut g = gateway(policy());
        for i in 0..2 {
            let d = g.route(&req(&format!("q{i}"), "a", Purpose::Secondary, false, dp_sum_op(0.5))).unwrap();
            assert_eq!(d.outcome, Outcome::Allowed);
            assert_eq!(d.epsilon_spent, 0.5);
        }
        let d = g.route(&req("q2", "a", Purpose::Secondary, false, dp_sum_op(0.5))).unwrap();
        assert_eq!(d.outcome, Outcome::Denied(DenialReason::BudgetExhausted));
        assert_eq!(g.audit().len(), 3);
        assert_eq!(g.ledger().len(), 2);
        assert_eq!(g.audit().records()[2].epsilon_spent, 0.0);
    }

    #[test]
    fn envelope_validation() {
        let mut g = gateway(policy());
        g.route(&req("r1", "a", Purpose::Primary, false, dp_sum_op(0.1))).unwrap();
        assert!(matches!(
            g.route(&req("r1", "a", Purpose::Primary, false, dp_sum_op(0.1))),
            Err(GatewayError::InvalidEnvelope(_))
        ));
        assert!(g.route(&req("", "a", Purpose::Primary, false, dp_sum_op(0.1))).is_err());
        assert_eq!(g.audit().len(), 1);
        let d = g.route(&req("r2", "a", Purpose::Primary, false, dp_sum_op(-1.0))).unwrap();
        assert_eq!(d.outcome, Outcome::Denied(DenialReason::InvalidRequest));
    }

    #[test]
    fn aggregation_threshold_and_smpc() {
        let mut g = gateway(PolicyConfig { min_aggregation_count: 6, ..policy() });
        let agg = Operation::AggregateReport(AggregateSpec { group_by: GroupBy::Interval });
        assert_eq!(g.route(&req("a1", "x", Purpose::Secondary, false, agg.clone())).unwrap().outcome, Outcome::Allowed);
        let mut g = gateway(PolicyConfig { min_aggregation_count: 7, ..policy() });
        assert_eq!(
            g.route(&req("a2", "x", Purpose::Secondary, false, agg)).unwrap().outcome,
            Outcome::Denied(DenialReason::BelowAggregationThreshold)
        );

        let mut g = gateway(policy());
        let smpc = |min| Operation::SmpcSum(SmpcSpec { timestamp: 0, min_participants: Some(min), dp_epsilon: None });
        let d = g.route(&req("s1", "x", Purpose::Secondary, false, smpc(3))).unwrap();
        let exact: f64 = g.data.dataset.readings_at(0).map(|r| r.energy().kwh()).sum();
        match d.result {
            Some(OperationResult::SecureSum { total_kwh, participants: 6, noised: false }) => {
                assert!((total_kwh - exact).abs() < 1e-9)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            g.route(&req("s2", "x", Purpose::Secondary, false, smpc(10))).unwrap().outcome,
            Outcome::Denied(DenialReason::BelowAggregationThreshold)
        );
    }

    #[test]
    fn quasi_identifier_reports() {
        let mut data = DataStore::new(dataset(6, 24));
        for (i, s) in data.dataset.series().iter().enumerate() {
            let class = if i < 3 { "res" } else { "com" };
            data.quasi_identifiers.insert(s.meter_id().clone(), QuasiIdentifierRecord::new(["941**", class]));
        }
        let agg = Operation::AggregateReport(AggregateSpec { group_by: GroupBy::QuasiIdentifier });
        let mut g = Gateway::new(policy(), data.clone(), AuditLog::in_memory(), 0).unwrap();
        let d = g.route(&req("a", "x", Purpose::Secondary, false, agg.clone())).unwrap();
        match d.result {
            Some(OperationResult::Aggregates { groups }) => assert_eq!(groups.len(), 2),
            other => panic!("{other:?}"),
        }
        let mut g = Gateway::new(PolicyConfig { k: 4, ..policy() }, data, AuditLog::in_memory(), 0).unwrap();
        assert_eq!(
            g.route(&req("b", "x", Purpose::Secondary, false, agg)).unwrap().outcome,
            Outcome::Denied(DenialReason::BelowAggregationThreshold)
        );
    }

    #[test]
    fn he_bill_matches_plaintext() {
        let mut g = gateway(policy());
        let rates: Vec<u64> = (0..24).map(|h| if (17..21).contains(&h) { 30 } else { 12 }).collect();
        let bill = Operation::HeBill(BillSpec { meter_id: "m002".into(), day_start: 86_400, rates: rates.clone() });
        assert_eq!(
            g.route(&req("b0", "x", Purpose::Secondary, false, bill.clone())).unwrap().outcome,
            Outcome::Denied(DenialReason::ConsentRequired)
        );
        let d = g.route(&req("b1", "x", Purpose::Primary, false, bill)).unwrap();
        let series = g.data.dataset.find(&MeterId::new("m002")).unwrap();
        let expected: i64 =
            series.readings()[24..48].iter().zip(&rates).map(|(r, &rate)| r.energy().milli_kwh() * rate as i64).sum();
        match d.result {
            Some(OperationResult::Bill { amount, .. }) => assert_eq!(amount, expected.to_string()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synth_memorization_gate() {
        let fed = Operation::SynthGenerate(SynthSpec { clusters: 2, households: 6, days: 1, seed: 3 });
        let mut g = gateway(PolicyConfig { memorization_threshold: 1.0, ..policy() });
        assert_eq!(
            g.route(&req("s", "x", Purpose::Secondary, false, fed.clone())).unwrap().outcome,
            Outcome::Denied(DenialReason::MemorizationDetected)
        );
        let mut g = gateway(PolicyConfig { memorization_threshold: 0.0, ..policy() });
        assert_eq!(g.route(&req("s", "x", Purpose::Secondary, false, fed)).unwrap().outcome, Outcome::Allowed);
    }

    #[test]
    fn fed_train_dispatch() {
        let mut g = Gateway::new(policy(), DataStore::new(dataset(4, 200)), AuditLog::in_memory(), 0).unwrap();
        let op = Operation::FedTrain(FedSpec {
            clients: 2,
            rounds: 3,
            local_steps: 1,
            learning_rate: 0.05,
            clip_norm: None,
            dp_sigma: None,
            secure_agg: true,
            seed: 4,
        });
        let d = g.route(&req("f", "x", Purpose::Secondary, false, op)).unwrap();
        assert_eq!(d.mechanism, "fedavg+masking");
        assert!(matches!(d.result, Some(OperationResult::Model { ref history, .. }) if history.len() == 3));
    }

    #[test]
    fn rate_limit() {
        let mut g = gateway(PolicyConfig { rate_limit: Some(2), epsilon_cap: 10.0, ..policy() });
        for i in 0..2 {
            assert!(g.route(&req(&format!("r{i}"), "a", Purpose::Primary, false, dp_sum_op(0.1))).unwrap().outcome.is_allowed());
        }
        let d = g.route(&req("r2", "a", Purpose::Primary, false, dp_sum_op(0.1))).unwrap();
        assert_eq!(d.outcome, Outcome::Denied(DenialReason::RateLimited));
        assert!(g.route(&req("r3", "b", Purpose::Primary, false, dp_sum_op(0.1))).unwrap().outcome.is_allowed());
    }

    #[test]
    fn fail_closed_on_audit_failure() {
        let (sink, armed) = FaultInjectingSink::new(MemorySink);
        let mut g = Gateway::new(
            PolicyConfig { allow_raw_primary: true, ..policy() },
            DataStore::new(dataset(3, 4)),
            AuditLog::with_sink(Box::new(sink)),
            0,
        )
        .unwrap();
        armed.store(true, Ordering::SeqCst);
        let r = g.route(&req("r", "x", Purpose::Primary, false, Operation::RawExport { meter_id: None }));
        assert!(matches!(r, Err(GatewayError::AuditWriteFailure(_))));
        assert!(g.audit().is_empty());
        armed.store(false, Ordering::SeqCst);
        assert!(g.route(&req("r", "x", Purpose::Primary, false, Operation::RawExport { meter_id: None })).is_ok());
        assert_eq!(g.audit().len(), 1);
    }

    #[test]
    fn audit_chain_and_tampering() {
        let mut log = AuditLog::in_memory();
        assert!(verify_chain(log.records()).valid);
        for i in 0..1000 {
            let outcome = if i % 3 == 0 { Outcome::Denied(DenialReason::BudgetExhausted) } else { Outcome::Allowed };
            log.append(&format!("r{i}"), "who", outcome, "laplace", 0.01, i).unwrap();
        }
        let records = log.records().to_vec();
        assert_eq!(records[0].prev_hash, GENESIS_HASH);
        assert_eq!(verify_chain(&records), ChainVerification { valid: true, first_bad_seq: None });

        let mut altered = records.clone();
        altered[500].epsilon_spent = 0.02;
        assert_eq!(verify_chain(&altered), ChainVerification { valid: false, first_bad_seq: Some(500) });

        let encoded: Vec<Vec<u8>> = records.iter().map(AuditRecord::to_bytes).collect();
        assert_eq!(AuditRecord::from_bytes(&encoded[7]).unwrap(), records[7]);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(0..encoded.len());
            let mut tampered = encoded.clone();
            let pos = rng.gen_range(0..tampered[k].len());
            tampered[k][pos] ^= 1 << rng.gen_range(0..8);
            let v = verify_encoded(&tampered);
            assert!(!v.valid);
            assert_eq!(v.first_bad_seq, Some(k as u64));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        {
            let mut log = AuditLog::open_jsonl(&path).unwrap();
            log.append("a", "x", Outcome::Allowed, "raw", 0.0, 1).unwrap();
            log.append("b", "y", Outcome::Denied(DenialReason::ConsentRequired), "raw", 0.0, 2).unwrap();
        }
        let mut log = AuditLog::open_jsonl(&path).unwrap();
        assert_eq!(log.len(), 2);
        log.append("c", "x", Outcome::Allowed, "laplace", 0.25, 3).unwrap();
        let records = read_jsonl(File::open(&path).unwrap()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(verify_chain(&records).valid);

        let text = std::fs::read_to_string(&path).unwrap().replace("\"y\"", "\"z\"");
        std::fs::write(&path, text).unwrap();
        assert_eq!(AuditLog::open_jsonl(&path).err(), Some(AuditError::Corrupt(1)));
    }

    #[test]
    fn spend_report_examples() {
        let ledger = BudgetLedger::new(100.0).unwrap();
        let mut log = AuditLog::in_memory();
        assert_eq!(spend_report(&ledger, log.records()).epsilon_total, 0.0);
        let p = PrivacyParams::pure(0.5).unwrap();
        for i in 0..24 {
            let id = format!("q{i}");
            ledger.charge(Some(&id), &p).unwrap();
            log.append(&id, "analyst", Outcome::Allowed, "laplace", 0.5, i).unwrap();
        }
        let r = spend_report(&ledger, log.records());
        assert_eq!(r.epsilon_total, 12.0);
        assert_eq!(r.per_requester["analyst"], 12.0);

        let ledger = BudgetLedger::new(1.0).unwrap();
        let mut log = AuditLog::in_memory();
        for (id, who, eps) in [("a", "alice", 0.3), ("b", "bob", 0.7)] {
            ledger.charge(Some(id), &PrivacyParams::pure(eps).unwrap()).unwrap();
            log.append(id, who, Outcome::Allowed, "laplace", eps, 0).unwrap();
        }
        log.append("c", "bob", Outcome::Denied(DenialReason::BudgetExhausted), "laplace", 0.0, 0).unwrap();
        let r = spend_report(&ledger, log.records());
        assert_eq!(r.per_requester["alice"], 0.3);
        assert_eq!(r.per_requester["bob"], 0.7);
        assert_eq!(r.epsilon_total, 1.0);
        assert_eq!(r.denied["BudgetExhausted"], 1);
    }

    #[test]
    fn serve_protocol() {
        let mut g = gateway(policy());
        let input = [
            r#"{"request_id":"1","requester":"a","purpose":"secondary","consent":false,"operation":{"type":"raw_export"}}"#,
            r#"{"request_id":"2","requester":"a","purpose":"secondary","consent":false,"operation":{"type":"dp_query","query":"count","timestamp":"1970-01-01T00:00:00Z","epsilon":0.5}}"#,
            "not json",
        ]
        .join("\n");
        let mut out = Vec::new();
        assert_eq!(serve(&mut g, input.as_bytes(), &mut out).unwrap(), 3);
        let lines: Vec<serde_json::Value> =
            String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["outcome"]["denied"], "ConsentRequired");
        assert_eq!(lines[1]["outcome"], "allowed");
        assert!(lines[2]["error"].is_string());
    }

    #[test]
    fn policy_validation() {
        assert!(PolicyConfig { epsilon_cap: 0.0, ..policy() }.validate().is_err());
        assert!(PolicyConfig { k: 0, ..policy() }.validate().is_err());
        assert!(PolicyConfig { min_aggregation_count: 0, ..policy() }.validate().is_err());
        assert!(policy().validate().is_ok());
    }
}
